use super::forward::{record_logits, Dropout};
use super::{GraphInputs, Model};
use crate::rng::{self, stream};
use crate::tensor::{ops, DenseMatrix, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adam steps per retraining after an acquisition.
    pub steps: usize,
    /// Adam steps for the model trained on the initial labeled set.
    pub initial_steps: usize,
    /// L2 penalty `(wd / 2)·‖θ‖²` on the first (input-side) weight matrix.
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            steps: 50,
            initial_steps: 200,
            weight_decay: 5e-4,
            dropout_rate: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let problem = if !(self.learning_rate > 0.0) {
            "learning_rate must be positive"
        } else if !(0.0..1.0).contains(&self.dropout_rate) {
            "dropout_rate must lie in [0, 1)"
        } else if !(self.weight_decay >= 0.0) {
            "weight_decay must be non-negative"
        } else if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            "adam betas must lie in [0, 1) and epsilon must be positive"
        } else {
            return Ok(());
        };
        Err(Error::Config(problem.into()))
    }

    /// Copy that runs `initial_steps` instead of `steps`.
    pub fn initial(&self) -> Self {
        Self {
            steps: self.initial_steps,
            ..self.clone()
        }
    }
}

/// N×C matrix with one-hot rows for `rows` and zeros elsewhere.
pub fn one_hot_targets(labels: &[usize], rows: &[usize], num_classes: usize) -> DenseMatrix {
    let mut t = DenseMatrix::zeros(labels.len(), num_classes);
    for &i in rows {
        t.set(i, labels[i], 1.0);
    }
    t
}

fn squared_norm(m: &DenseMatrix) -> f64 {
    m.data().iter().map(|x| x * x).sum()
}

/// Dropout-free training objective: mean cross entropy over `labeled` plus
/// the weight-decay term.
pub fn training_loss(
    model: &Model,
    inputs: &GraphInputs,
    labels: &[usize],
    labeled: &[usize],
    weight_decay: f64,
) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let targets = one_hot_targets(labels, labeled, model.num_classes());
    let ce = ops::cross_entropy_soft(&model.logits(inputs)?, &targets, labeled)?;
    Ok(ce + 0.5 * weight_decay * squared_norm(model.weights()[0]))
}

/// Runs `config.steps` Adam iterations on the labeled cross entropy,
/// starting from the current weights with fresh moment estimates. Dropout
/// masks come from `seed`. Returns the objective measured at every step,
/// under that step's dropout masks, before the update.
pub fn train_adam(
    model: &mut Model,
    inputs: &GraphInputs,
    labels: &[usize],
    labeled: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    config.validate()?;
    let targets = one_hot_targets(labels, labeled, model.num_classes());
    let mut rng = rng::rng_for(seed, &[stream::TRAIN_DROPOUT]);
    let mut first: Vec<DenseMatrix> = model.weights().iter().map(|w| DenseMatrix::zeros(w.rows(), w.cols())).collect();
    let mut second = first.clone();
    let mut history = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.weights().into_iter().map(|w| tape.leaf(w.clone())).collect();
        let mut dropout = Dropout {
            rate: config.dropout_rate,
            rng: &mut rng,
        };
        let logits = record_logits(&mut tape, model, inputs, &vars, Some(&mut dropout))?;
        let t = tape.constant(targets.clone());
        let loss = tape.cross_entropy_soft(logits, t, labeled)?;
        let grads = tape.backward(loss)?;
        history.push(tape.scalar(loss)? + 0.5 * config.weight_decay * squared_norm(model.weights()[0]));

        let bias1 = 1.0 - config.beta1.powi(step as i32);
        let bias2 = 1.0 - config.beta2.powi(step as i32);
        for (idx, weight) in model.weights_mut().into_iter().enumerate() {
            let mut g = grads.get(vars[idx])?;
            if idx == 0 {
                g.add_scaled(weight, config.weight_decay);
            }
            let (m, v) = (first[idx].data_mut(), second[idx].data_mut());
            for (k, w) in weight.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
                *w -= config.learning_rate * (m[k] / bias1) / ((v[k] / bias2).sqrt() + config.epsilon);
            }
        }
    }
    Ok(history)
}
