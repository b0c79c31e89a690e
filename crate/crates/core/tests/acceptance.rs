//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass substrings as arguments to run a subset.
//!
//! The named-dataset checks read `$METAL_DATA_ROOT/citeseer` and
//! `$METAL_DATA_ROOT/cora` when those directories exist with the expected
//! node, class and feature counts; otherwise they run on block-model
//! surrogates of the same size, degree, homophily and word counts.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metal_al::baselines::{pagerank, score_bald, DAMPING, TOLERANCE};
use metal_al::graph::{
    generate_sbm, load_dataset, make_initial_split, normalized_adjacency, FeatureModel, GraphDataset, SbmConfig,
};
use metal_al::harness::{run_al_loop, timing_summary, ExperimentConfig, RunResult, StepEvent, Strategy};
use metal_al::metal::{
    entropy_set_size, expected_meta_gradient, inner_train_perturbed, meta_cost, meta_gradient, metal_acquire,
    partition_pool, MetaConfig, MetaProblem, PerturbationMatrix,
};
use metal_al::models::{
    mc_dropout_posterior, train_adam, GraphInputs, Model, ModelConfig, ModelKind, TrainConfig,
};
use metal_al::tensor::{DenseMatrix, Tape};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SEEDS: u64 = 10;
const BUDGET: usize = 40;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Node, class, feature and edge counts plus bag-of-words density.
struct Shape {
    name: &'static str,
    nodes: usize,
    classes: usize,
    features: usize,
    p_in: f64,
    p_out: f64,
    words: usize,
}

const CITESEER: Shape = Shape {
    name: "citeseer",
    nodes: 2110,
    classes: 6,
    features: 3703,
    p_in: 0.0073,
    p_out: 0.000514,
    words: 32,
};

const CORA: Shape = Shape {
    name: "cora",
    nodes: 2485,
    classes: 7,
    features: 1433,
    p_in: 0.0092,
    p_out: 0.00038,
    words: 18,
};

fn named_dataset(shape: &Shape) -> (GraphDataset, String) {
    if let Some(root) = std::env::var_os("METAL_DATA_ROOT") {
        let dir = PathBuf::from(root).join(shape.name);
        if dir.is_dir() {
            match load_dataset(&dir) {
                Ok(d) if (d.num_nodes(), d.num_classes(), d.num_features()) == (shape.nodes, shape.classes, shape.features) => {
                    return (d, format!("{}", dir.display()));
                }
                Ok(d) => eprintln!(
                    "{}: counts ({}, {}, {}) differ from ({}, {}, {}); using the surrogate",
                    dir.display(),
                    d.num_nodes(),
                    d.num_classes(),
                    d.num_features(),
                    shape.nodes,
                    shape.classes,
                    shape.features
                ),
                Err(e) => eprintln!("{e}; using the surrogate"),
            }
        }
    }
    let config = SbmConfig {
        name: shape.name.into(),
        block_sizes: SbmConfig::balanced_sizes(shape.nodes, shape.classes),
        p_in: shape.p_in,
        p_out: shape.p_out,
        feature_dim: shape.features,
        feature_shift: 0.0,
        features: FeatureModel::BagOfWords {
            words_per_node: shape.words,
            topic_fraction: 0.2,
        },
        seed: 0,
    };
    (generate_sbm(&config).expect("surrogate parameters are valid"), "surrogate".into())
}

struct Runs {
    runs: Vec<RunResult>,
    events: Vec<Vec<StepEvent>>,
    seconds: f64,
}

fn run_seeds(dataset: &GraphDataset, inputs: &GraphInputs, strategy: Strategy) -> Runs {
    let config = ExperimentConfig {
        budget: BUDGET,
        ..ExperimentConfig::default()
    };
    let started = Instant::now();
    let mut runs = Vec::new();
    let mut events = Vec::new();
    for seed in 0..SEEDS {
        let mut ev = Vec::new();
        let run = run_al_loop(dataset, inputs, &config, strategy, seed, &mut |e| ev.push(e.clone()))
            .expect("acceptance run");
        eprintln!(
            "  {} {strategy} seed {seed}: f1 {:.4} -> {:.4} in {:.1}s",
            dataset.name(),
            run.records[0].macro_f1,
            run.final_f1(),
            run.total_seconds()
        );
        runs.push(run);
        events.push(ev);
    }
    Runs {
        runs,
        events,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn mean_final(r: &Runs) -> f64 {
    r.runs.iter().map(RunResult::final_f1).sum::<f64>() / r.runs.len() as f64
}

fn paired_wins(a: &Runs, b: &Runs) -> usize {
    a.runs.iter().zip(&b.runs).filter(|(x, y)| x.final_f1() > y.final_f1()).count()
}

/// Meta-gradient entries against central differences of the unrolled cost.
fn meta_gradient_finite_differences() -> Outcome {
    let started = Instant::now();
    let dataset = generate_sbm(&SbmConfig::uniform(3, 10, 0.4, 0.05, 6, 1.0, 11)).unwrap();
    let inputs = GraphInputs::new(&dataset);
    let state = make_initial_split(&dataset, 11).unwrap();
    let mut model = Model::init(ModelKind::Gcn, &ModelConfig { hidden: 8, sgc_k: 2 }, 6, 3, 11);
    train_adam(&mut model, &inputs, dataset.labels(), state.labeled(), &TrainConfig::default().initial(), 11).unwrap();
    let posterior = mc_dropout_posterior(&model, &inputs, 20, 0.5, 11).unwrap();
    let partition = partition_pool(&state, &posterior, 0.1).unwrap();
    let config = MetaConfig::default();
    let problem = MetaProblem {
        model: &model,
        inputs: &inputs,
        labels: dataset.labels(),
        labeled: state.labeled(),
        partition: &partition,
        pseudo_labels: &posterior.mean_probs,
    };
    let q = partition.query_set.len();
    let cost_at = |delta: DenseMatrix| {
        let mut tape = Tape::new();
        let d = PerturbationMatrix::with_values(&mut tape, &partition.query_set, delta);
        let theta = inner_train_perturbed(&mut tape, &problem, &d, &config).unwrap();
        let cost = meta_cost(&mut tape, &problem, &theta).unwrap();
        tape.scalar(cost).unwrap()
    };
    let mut tape = Tape::new();
    let delta = PerturbationMatrix::zeros(&mut tape, &partition.query_set, 3);
    let theta = inner_train_perturbed(&mut tape, &problem, &delta, &config).unwrap();
    let cost = meta_cost(&mut tape, &problem, &theta).unwrap();
    let grad = meta_gradient(&tape, cost, &delta).unwrap();

    let eps = 1e-3;
    // Entries whose reference is below 1e-3 are judged by absolute error:
    // 1e-3 relative of a smaller value is below the difference quotient's
    // own rounding noise.
    let near_zero = 1e-3;
    let (mut max_rel, mut max_abs_small, mut entries, mut small) = (0.0f64, 0.0f64, 0, 0);
    for r in 0..q {
        for k in 0..3 {
            let shifted = |s: f64| {
                let mut d = DenseMatrix::zeros(q, 3);
                d.set(r, k, s);
                cost_at(d)
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let err = (grad.get(r, k) - fd).abs();
            entries += 1;
            if fd.abs() < near_zero {
                small += 1;
                max_abs_small = max_abs_small.max(err);
            } else {
                max_rel = max_rel.max(err / fd.abs());
            }
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    outcome(
        max_rel <= 1e-3 && max_abs_small <= 1e-6 && seconds <= 120.0,
        format!(
            "{entries} entries ({small} near zero): max rel {max_rel:.2e} (<= 1e-3), max abs near zero {max_abs_small:.2e} (<= 1e-6), {seconds:.1}s (<= 120s)"
        ),
    )
}

/// `Σ_k p_qk g_qk` recomputed term by term on random fixtures.
fn expected_gradient_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let c = rng.random_range(2..9);
        let mut posterior = DenseMatrix::from_fn(n, c, |_, _| rng.random::<f64>() + 1e-3);
        for i in 0..n {
            let total: f64 = posterior.row(i).iter().sum();
            posterior.row_mut(i).iter_mut().for_each(|p| *p /= total);
        }
        let nodes: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
        let grad = DenseMatrix::from_fn(nodes.len(), c, |_, _| rng.random_range(-5.0..5.0));
        let got = expected_meta_gradient(&grad, &posterior, &nodes).unwrap();
        for (r, &node) in nodes.iter().enumerate() {
            let mut brute = 0.0;
            for k in 0..c {
                brute += posterior.get(node, k) * grad.get(r, k);
            }
            worst = worst.max((got[&node] - brute).abs());
        }
    }
    outcome(worst <= 1e-12, format!("100 fixtures, max abs difference {worst:.1e} (<= 1e-12)"))
}

fn protocol_fidelity(dataset: &GraphDataset, metal: &Runs) -> Outcome {
    let mut problems = Vec::new();
    let c = dataset.num_classes();
    for (run, events) in metal.runs.iter().zip(&metal.events) {
        let state = make_initial_split(dataset, run.seed).unwrap();
        if state.labeled().len() != 2 * c {
            problems.push(format!("seed {}: {} initial labels", run.seed, state.labeled().len()));
        }
        let last = events.last().map_or(0, |e| e.labeled);
        if last != 2 * c + BUDGET || events.len() != BUDGET {
            problems.push(format!("seed {}: {last} labels after {} steps", run.seed, events.len()));
        }
        for e in events {
            if e.entropy_set != Some(e.pool_before.div_ceil(10)) || entropy_set_size(e.pool_before, 0.1) != e.pool_before.div_ceil(10) {
                problems.push(format!("seed {} step {}: entropy set {:?} for pool {}", run.seed, e.step, e.entropy_set, e.pool_before));
            }
        }
    }
    let first = &metal.events[0];
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{}: |L| {} -> {} over {} seeds; entropy set {} at pool {} ... {} at pool {}",
                dataset.name(),
                2 * c,
                2 * c + BUDGET,
                metal.runs.len(),
                first[0].entropy_set.unwrap_or(0),
                first[0].pool_before,
                first[BUDGET - 1].entropy_set.unwrap_or(0),
                first[BUDGET - 1].pool_before
            )
        } else {
            problems.join("; ")
        },
    )
}

fn beats_random(name: &str, metal: &Runs, random: &Runs) -> (bool, String) {
    let (m, r) = (mean_final(metal), mean_final(random));
    let wins = paired_wins(metal, random);
    (
        m >= r && wins >= 6,
        format!("{name}: metal {m:.4} vs random {r:.4}, {wins}/10 paired wins"),
    )
}

fn invariant_suite(datasets: &[(&GraphDataset, &GraphInputs)], all_runs: &[&Runs]) -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            failures.push(what);
        }
    };

    for &(dataset, inputs) in datasets {
        let name = dataset.name();
        let pr = pagerank(dataset, DAMPING, TOLERANCE);
        let total: f64 = pr.iter().sum();
        check((total - 1.0).abs() <= 1e-8 && pr.iter().all(|&p| p >= 0.0), format!("{name}: pagerank sum {total}"));

        let state = make_initial_split(dataset, 0).unwrap();
        let mut model = Model::init(ModelKind::Gcn, &ModelConfig::default(), dataset.num_features(), dataset.num_classes(), 0);
        train_adam(&mut model, inputs, dataset.labels(), state.labeled(), &TrainConfig::default().initial(), 0).unwrap();
        let probs = model.predict_proba(inputs).unwrap();
        let posterior = mc_dropout_posterior(&model, inputs, 20, 0.5, 1).unwrap();
        for m in std::iter::once(&probs).chain(std::iter::once(&posterior.mean_probs)).chain(&posterior.sample_probs) {
            let worst = (0..m.rows())
                .map(|i| (m.row(i).iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            check(
                worst <= 1e-12 && m.data().iter().all(|p| (0.0..=1.0).contains(p)),
                format!("{name}: probability rows off by {worst:.1e}"),
            );
        }
        let a = normalized_adjacency(dataset);
        check(a.values().iter().all(|&v| v > 0.0 && v <= 1.0), format!("{name}: normalized adjacency outside (0, 1]"));

        let bald = score_bald(&state, &posterior).unwrap();
        let lowest = bald.values().fold(f64::INFINITY, f64::min);
        check(lowest >= -1e-9, format!("{name}: bald minimum {lowest:.2e}"));

        let partition = partition_pool(&state, &posterior, 0.1).unwrap();
        let es: BTreeSet<usize> = partition.entropy_set.iter().copied().collect();
        let qs: BTreeSet<usize> = partition.query_set.iter().copied().collect();
        let union: BTreeSet<usize> = es.union(&qs).copied().collect();
        check(es.is_disjoint(&qs) && &union == state.pool(), format!("{name}: partition does not split the pool"));

        for step in [1, 20, 40] {
            let a = metal_acquire(&state, dataset, inputs, &model, &posterior, step, &MetaConfig::default(), 0).unwrap();
            check(
                a.rows.iter().all(|r| (0.0..=1.0).contains(&r.phi)),
                format!("{name} step {step}: phi outside [0, 1]"),
            );
            check(
                qs.contains(&a.node),
                format!("{name} step {step}: acquired {} outside the query set", a.node),
            );
        }
    }

    for runs in all_runs {
        for (run, events) in runs.runs.iter().zip(&runs.events) {
            let name = format!("{} {} seed {}", run.dataset, run.strategy, run.seed);
            let dataset = datasets.iter().find(|(d, _)| d.name() == run.dataset).expect("dataset").0;
            let state = make_initial_split(dataset, run.seed).unwrap();
            let acquired = run.acquired();
            check(
                acquired.iter().all(|n| state.pool().contains(n)),
                format!("{name}: acquired a labeled or test node"),
            );
            check(
                acquired.iter().collect::<BTreeSet<_>>().len() == acquired.len(),
                format!("{name}: repeated acquisition"),
            );
            check(events.iter().all(|e| !e.was_test), format!("{name}: test node reached the oracle"));
            check(
                run.records.iter().all(|r| (0.0..=1.0).contains(&r.macro_f1)),
                format!("{name}: macro-F1 outside [0, 1]"),
            );
            check(
                events.iter().enumerate().all(|(k, e)| e.labeled == state.labeled().len() + k + 1),
                format!("{name}: labeled set did not grow by one per step"),
            );
        }
    }

    // Replaying a prefix reproduces the recorded run bit for bit.
    let (dataset, inputs) = datasets[0];
    let short = ExperimentConfig {
        budget: 3,
        ..ExperimentConfig::default()
    };
    for runs in all_runs.iter().filter(|r| r.runs[0].dataset == dataset.name()) {
        let recorded = &runs.runs[1];
        let strategy: Strategy = recorded.strategy.parse().unwrap();
        let replay = run_al_loop(dataset, inputs, &short, strategy, recorded.seed, &mut |_| {}).unwrap();
        let same = replay
            .records
            .iter()
            .zip(&recorded.records)
            .all(|(a, b)| a.acquired_node == b.acquired_node && a.macro_f1.to_bits() == b.macro_f1.to_bits());
        check(same, format!("{} {}: replay differs", dataset.name(), recorded.strategy));
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "pagerank, probability rows, adjacency, bald, partition, phi, eligibility and replay on {} datasets and {} runs",
                datasets.len(),
                all_runs.iter().map(|r| r.runs.len()).sum::<usize>()
            )
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |key: &str| filters.is_empty() || filters.iter().any(|f| key.contains(f.as_str()));
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |key: &'static str, o: Outcome| {
        println!("{} {key}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((key, o));
    };

    if wanted("meta_gradient_fd") {
        report("meta_gradient_fd", meta_gradient_finite_differences());
    }
    if wanted("expected_gradient_identity") {
        report("expected_gradient_identity", expected_gradient_identity());
    }

    let heavy = ["protocol_fidelity", "metal_vs_random", "ablation_gamma", "timing_direction", "invariant_suite"];
    if heavy.iter().any(|k| wanted(k)) {
        let (citeseer, citeseer_source) = named_dataset(&CITESEER);
        let (cora, cora_source) = named_dataset(&CORA);
        eprintln!("citeseer: {citeseer_source}; cora: {cora_source}");
        let cs_inputs = GraphInputs::new(&citeseer);
        let cora_inputs = GraphInputs::new(&cora);

        let cs_random = run_seeds(&citeseer, &cs_inputs, Strategy::Random);
        let cs_metal = run_seeds(&citeseer, &cs_inputs, Strategy::Metal);

        if wanted("protocol_fidelity") {
            report("protocol_fidelity", protocol_fidelity(&citeseer, &cs_metal));
        }

        let mut figure_runs = vec![];
        if wanted("metal_vs_random") || wanted("invariant_suite") {
            let cora_random = run_seeds(&cora, &cora_inputs, Strategy::Random);
            let cora_metal = run_seeds(&cora, &cora_inputs, Strategy::Metal);
            let seconds = cs_random.seconds + cs_metal.seconds + cora_random.seconds + cora_metal.seconds;
            let (a, da) = beats_random("citeseer", &cs_metal, &cs_random);
            let (b, db) = beats_random("cora", &cora_metal, &cora_random);
            if wanted("metal_vs_random") {
                report(
                    "metal_vs_random",
                    outcome(a && b && seconds <= 3600.0, format!("{da}; {db}; {seconds:.0}s total (<= 3600s)")),
                );
            }
            figure_runs.push(cora_random);
            figure_runs.push(cora_metal);
        }

        if wanted("ablation_gamma") {
            let explore = run_seeds(&citeseer, &cs_inputs, Strategy::MetalFixed(1.0));
            let exploit = run_seeds(&citeseer, &cs_inputs, Strategy::MetalFixed(0.0));
            let (e1, e0) = (mean_final(&explore), mean_final(&exploit));
            report(
                "ablation_gamma",
                outcome(e1 <= e0, format!("citeseer: gamma=1 {e1:.4} vs gamma=0 {e0:.4}")),
            );
        }

        if wanted("timing_direction") {
            let entropy = run_seeds(&citeseer, &cs_inputs, Strategy::Entropy);
            let all: Vec<RunResult> = [&cs_random, &entropy, &cs_metal].iter().flat_map(|r| r.runs.clone()).collect();
            let timing = timing_summary(&all).unwrap();
            let secs = |s: &str| timing.iter().find(|t| t.strategy == s).unwrap().mean_seconds;
            let (r, e, m) = (secs("random"), secs("entropy"), secs("metal"));
            report(
                "timing_direction",
                outcome(
                    r <= e && e <= m && m <= 10.0 * e,
                    format!("citeseer mean run seconds: random {r:.1} <= entropy {e:.1} <= metal {m:.1} <= 10x entropy ({:.2}x)", m / e),
                ),
            );
        }

        if wanted("invariant_suite") {
            let mut all_runs: Vec<&Runs> = vec![&cs_random, &cs_metal];
            all_runs.extend(figure_runs.iter());
            report(
                "invariant_suite",
                invariant_suite(&[(&citeseer, &cs_inputs), (&cora, &cora_inputs)], &all_runs),
            );
        }
    }

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
