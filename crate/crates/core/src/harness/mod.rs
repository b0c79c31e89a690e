//! The active-learning protocol: split, train, then repeatedly score the
//! pool, reveal one label, retrain and evaluate. Also multi-seed
//! comparisons and result files.

mod results;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

pub use results::{
    aggregate, load_aggregate, load_results, persist_aggregate, persist_results, timing_summary, write_metadata,
    AggregateRow, TimingRow, AGGREGATE_HEADER, RESULTS_HEADER, TIMING_SCOPE,
};

use crate::baselines::{
    score_age, score_bald, score_degree, score_entropy, score_pagerank, score_random, select_top, AgeConfig, ScoreVector,
    DAMPING, TOLERANCE,
};
use crate::graph::{make_initial_split, ALState, GraphDataset};
use crate::metal::{metal_acquire, GammaSchedule, MetaConfig, MetalAcquisition};
use crate::models::{
    macro_f1, mc_dropout_posterior, predict_classes, train_adam, GraphInputs, Model, ModelConfig, ModelKind,
    PredictiveDistribution, TrainConfig,
};
use crate::par;
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Random,
    Degree,
    PageRank,
    Entropy,
    Bald,
    Age,
    /// Meta-gradient acquisition with the configured γ schedule.
    Metal,
    /// Meta-gradient acquisition with γ held fixed.
    MetalFixed(f64),
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Self::Random,
        Self::Degree,
        Self::PageRank,
        Self::Entropy,
        Self::Bald,
        Self::Age,
        Self::Metal,
    ];

    /// Whether a step of this strategy computes an MC-dropout posterior.
    pub fn needs_posterior(self) -> bool {
        !matches!(self, Self::Random | Self::Degree | Self::PageRank)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(g) = lower.strip_prefix("metal:") {
            return match g.parse::<f64>() {
                Ok(g) if (0.0..=1.0).contains(&g) => Ok(Self::MetalFixed(g)),
                _ => Err(Error::Config(format!("'{s}': fixed gamma must be a number in [0, 1]"))),
            };
        }
        Ok(match lower.as_str() {
            "random" => Self::Random,
            "degree" => Self::Degree,
            "pagerank" => Self::PageRank,
            "entropy" => Self::Entropy,
            "bald" => Self::Bald,
            "age" => Self::Age,
            "metal" => Self::Metal,
            _ => {
                return Err(Error::Config(format!(
                    "unknown strategy '{s}' (expected random, degree, pagerank, entropy, bald, age, metal or metal:<gamma>)"
                )))
            }
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Random => f.write_str("random"),
            Self::Degree => f.write_str("degree"),
            Self::PageRank => f.write_str("pagerank"),
            Self::Entropy => f.write_str("entropy"),
            Self::Bald => f.write_str("bald"),
            Self::Age => f.write_str("age"),
            Self::Metal => f.write_str("metal"),
            Self::MetalFixed(g) => write!(f, "metal:{g}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub model_config: ModelConfig,
    pub strategies: Vec<Strategy>,
    /// Acquisitions per run.
    pub budget: usize,
    /// Number of seeds; run `i` uses seed `base_seed + i`.
    pub seeds: usize,
    pub base_seed: u64,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub age: AgeConfig,
    pub mc_passes: usize,
    /// Concurrent runs in [`run_comparison`]; 0 uses every available thread.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Gcn,
            model_config: ModelConfig::default(),
            strategies: vec![Strategy::Random, Strategy::Metal],
            budget: 40,
            seeds: 10,
            base_seed: 0,
            train: TrainConfig::default(),
            meta: MetaConfig::default(),
            age: AgeConfig::default(),
            mc_passes: 20,
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.seeds == 0 {
            return Err(Error::Config("budget and seeds must both be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies given".into()));
        }
        if self.mc_passes < 2 && self.strategies.contains(&Strategy::Bald) {
            return Err(Error::Config("bald needs at least two MC-dropout passes".into()));
        }
        if self.mc_passes == 0 {
            return Err(Error::Config("mc_passes must be at least 1".into()));
        }
        self.train.validate()?;
        self.meta.validate()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.base_seed + i).collect()
    }

    /// MetaConfig for `strategy`, with γ pinned for the fixed variant.
    pub fn meta_for(&self, strategy: Strategy) -> MetaConfig {
        match strategy {
            Strategy::MetalFixed(g) => MetaConfig {
                gamma: GammaSchedule::Fixed(g),
                ..self.meta.clone()
            },
            _ => self.meta.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// `None` for the pre-acquisition record.
    pub acquired_node: Option<usize>,
    pub macro_f1: f64,
    /// Wall time of posterior, scoring, selection and retraining.
    pub step_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub dataset: String,
    pub model: ModelKind,
    pub strategy: String,
    pub seed: u64,
    /// `budget + 1` records; the first is the initial model.
    pub records: Vec<StepRecord>,
}

impl RunResult {
    pub fn final_f1(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.macro_f1)
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.step_seconds).sum()
    }

    pub fn acquired(&self) -> Vec<usize> {
        self.records.iter().filter_map(|r| r.acquired_node).collect()
    }
}

/// What the loop reports after each acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepEvent {
    pub step: usize,
    pub node: usize,
    pub labeled: usize,
    /// Pool size before the acquisition.
    pub pool_before: usize,
    /// Entropy-set size, for meta-gradient steps.
    pub entropy_set: Option<usize>,
    pub was_test: bool,
}

/// A strategy's decision for one step.
#[derive(Clone, Debug, PartialEq)]
pub enum Choice {
    Scored { node: usize, scores: ScoreVector },
    Metal(MetalAcquisition),
}

impl Choice {
    pub fn node(&self) -> usize {
        match self {
            Self::Scored { node, .. } => *node,
            Self::Metal(a) => a.node,
        }
    }
}

/// Everything a strategy may look at when choosing.
pub struct StepContext<'a> {
    pub dataset: &'a GraphDataset,
    pub inputs: &'a GraphInputs,
    pub state: &'a ALState,
    pub model: &'a Model,
    pub posterior: Option<&'a PredictiveDistribution>,
    pub step: usize,
    pub seed: u64,
}

fn required<'a>(posterior: Option<&'a PredictiveDistribution>, strategy: Strategy) -> Result<&'a PredictiveDistribution> {
    posterior.ok_or_else(|| Error::Config(format!("{strategy} needs a posterior")))
}

/// Scores the pool with `strategy` and picks a node.
pub fn choose(strategy: Strategy, ctx: &StepContext<'_>, config: &ExperimentConfig) -> Result<Choice> {
    let step_seed = rng::derive_seed(ctx.seed, &[ctx.step as u64]);
    let scores = match strategy {
        Strategy::Random => score_random(ctx.state, step_seed)?,
        Strategy::Degree => score_degree(ctx.state, ctx.dataset)?,
        Strategy::PageRank => score_pagerank(ctx.state, ctx.dataset, DAMPING, TOLERANCE)?,
        Strategy::Entropy => score_entropy(ctx.state, required(ctx.posterior, strategy)?)?,
        Strategy::Bald => score_bald(ctx.state, required(ctx.posterior, strategy)?)?,
        Strategy::Age => {
            let embeddings = ctx.model.embeddings(ctx.inputs)?;
            score_age(
                ctx.state,
                ctx.dataset,
                required(ctx.posterior, strategy)?,
                &embeddings,
                step_seed,
                &config.age,
            )?
        }
        Strategy::Metal | Strategy::MetalFixed(_) => {
            return Ok(Choice::Metal(metal_acquire(
                ctx.state,
                ctx.dataset,
                ctx.inputs,
                ctx.model,
                required(ctx.posterior, strategy)?,
                ctx.step,
                &config.meta_for(strategy),
                ctx.seed,
            )?));
        }
    };
    Ok(Choice::Scored {
        node: select_top(&scores)?,
        scores,
    })
}

/// Initial split and model for `seed`, identical for every strategy.
pub fn initial_model(
    dataset: &GraphDataset,
    inputs: &GraphInputs,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(ALState, Model)> {
    let state = make_initial_split(dataset, seed)?;
    let mut model = Model::init(
        config.model,
        &config.model_config,
        dataset.num_features(),
        dataset.num_classes(),
        seed,
    );
    train_adam(
        &mut model,
        inputs,
        dataset.labels(),
        state.labeled(),
        &config.train.initial(),
        rng::derive_seed(seed, &[0]),
    )?;
    Ok((state, model))
}

pub fn evaluate(model: &Model, inputs: &GraphInputs, dataset: &GraphDataset, state: &ALState) -> Result<f64> {
    let predictions = predict_classes(&model.predict_proba(inputs)?);
    macro_f1(&predictions, dataset.labels(), state.test(), dataset.num_classes())
}

/// One full run of `config.budget` acquisitions.
pub fn run_al_loop(
    dataset: &GraphDataset,
    inputs: &GraphInputs,
    config: &ExperimentConfig,
    strategy: Strategy,
    seed: u64,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<RunResult> {
    let (mut state, mut model) = initial_model(dataset, inputs, config, seed)?;
    if config.budget > state.pool().len() {
        return Err(Error::Config(format!(
            "budget {} exceeds the initial pool of {} nodes",
            config.budget,
            state.pool().len()
        )));
    }
    let mut records = Vec::with_capacity(config.budget + 1);
    records.push(StepRecord {
        step: 0,
        acquired_node: None,
        macro_f1: evaluate(&model, inputs, dataset, &state)?,
        step_seconds: 0.0,
    });
    for step in 1..=config.budget {
        let started = Instant::now();
        let posterior = if strategy.needs_posterior() {
            Some(mc_dropout_posterior(
                &model,
                inputs,
                config.mc_passes,
                config.train.dropout_rate,
                rng::derive_seed(seed, &[step as u64, 1]),
            )?)
        } else {
            None
        };
        let ctx = StepContext {
            dataset,
            inputs,
            state: &state,
            model: &model,
            posterior: posterior.as_ref(),
            step,
            seed,
        };
        let choice = choose(strategy, &ctx, config)?;
        let node = choice.node();
        let event = StepEvent {
            step,
            node,
            labeled: state.labeled().len() + 1,
            pool_before: state.pool().len(),
            entropy_set: match &choice {
                Choice::Metal(a) => Some(a.partition.entropy_set.len()),
                Choice::Scored { .. } => None,
            },
            was_test: state.test().binary_search(&node).is_ok(),
        };
        // The simulated oracle: the label is already in the dataset, so
        // acquiring only moves the node into the labeled set.
        state.acquire(step, node)?;
        train_adam(
            &mut model,
            inputs,
            dataset.labels(),
            state.labeled(),
            &config.train,
            rng::derive_seed(seed, &[step as u64]),
        )?;
        let step_seconds = started.elapsed().as_secs_f64();
        records.push(StepRecord {
            step,
            acquired_node: Some(node),
            macro_f1: evaluate(&model, inputs, dataset, &state)?,
            step_seconds,
        });
        observer(&event);
    }
    Ok(RunResult {
        dataset: dataset.name().to_string(),
        model: config.model,
        strategy: strategy.to_string(),
        seed,
        records,
    })
}

/// Every (strategy, seed) run plus the per-step aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    pub aggregate: Vec<AggregateRow>,
}

/// Runs all (strategy, seed) pairs, up to `config.jobs` at a time. Results
/// come back in (strategy, seed) order whatever the concurrency.
pub fn run_comparison(dataset: &GraphDataset, config: &ExperimentConfig) -> Result<Comparison> {
    config.validate()?;
    let inputs = GraphInputs::new(dataset);
    let pairs: Vec<(Strategy, u64)> = config
        .strategies
        .iter()
        .flat_map(|&s| config.seed_list().into_iter().map(move |seed| (s, seed)))
        .collect();
    let jobs = if config.jobs == 0 { par::current_threads() } else { config.jobs };
    let outcomes = par::with_threads(jobs, || {
        par::map_slice(&pairs, |&(strategy, seed)| run_al_loop(dataset, &inputs, config, strategy, seed, &mut |_| {}))
    });
    let runs = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&runs);
    Ok(Comparison { runs, aggregate })
}
