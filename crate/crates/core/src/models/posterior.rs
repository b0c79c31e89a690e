use super::forward::{gcn_forward, sgc_forward, Dropout};
use super::{GraphInputs, Model};
use crate::par;
use crate::rng::{self, stream};
use crate::tensor::{ops, DenseMatrix};
use crate::{Error, Result};

/// Class probabilities from several stochastic forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    /// N×C average of the per-pass softmax outputs.
    pub mean_probs: DenseMatrix,
    /// One N×C softmax output per pass.
    pub sample_probs: Vec<DenseMatrix>,
}

impl PredictiveDistribution {
    /// Wraps a single deterministic prediction.
    pub fn deterministic(probs: DenseMatrix) -> Self {
        Self {
            mean_probs: probs.clone(),
            sample_probs: vec![probs],
        }
    }

    pub fn num_samples(&self) -> usize {
        self.sample_probs.len()
    }
}

/// `passes` forward passes with dropout active. Pass `t` draws its masks
/// from its own stream, so passes can run in parallel and the result does
/// not depend on the thread count.
pub fn mc_dropout_posterior(
    model: &Model,
    inputs: &GraphInputs,
    passes: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<PredictiveDistribution> {
    if passes == 0 {
        return Err(Error::Config("MC-dropout needs at least one pass".into()));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
    }
    let samples = par::map_range(passes, |t| {
        let mut rng = rng::rng_for(seed, &[stream::MC_DROPOUT, t as u64]);
        let mut dropout = Dropout {
            rate: dropout_rate,
            rng: &mut rng,
        };
        let logits = match model {
            Model::Gcn(p) => gcn_forward(&inputs.a_hat, &inputs.features, p, Some(&mut dropout)),
            Model::Sgc(p) => sgc_forward(&inputs.a_hat, &inputs.features, p, Some(&mut dropout)),
        };
        logits.map(|z| ops::softmax_rows(&z))
    });
    let sample_probs = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut mean_probs = DenseMatrix::zeros(sample_probs[0].rows(), sample_probs[0].cols());
    for s in &sample_probs {
        mean_probs.add_scaled(s, 1.0);
    }
    let mean_probs = mean_probs.scaled(1.0 / passes as f64);
    Ok(PredictiveDistribution {
        mean_probs,
        sample_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmConfig};
    use crate::models::{train_adam, ModelConfig, ModelKind, TrainConfig};

    fn trained() -> (Model, GraphInputs) {
        let d = generate_sbm(&SbmConfig::uniform(3, 10, 0.4, 0.05, 6, 1.0, 2)).unwrap();
        let inputs = GraphInputs::new(&d);
        let mut model = Model::init(ModelKind::Gcn, &ModelConfig { hidden: 8, sgc_k: 2 }, 6, 3, 1);
        train_adam(&mut model, &inputs, d.labels(), &[0, 1, 2, 3, 4, 5], &TrainConfig::default(), 1).unwrap();
        (model, inputs)
    }

    #[test]
    fn zero_rate_passes_are_identical() {
        let (model, inputs) = trained();
        let post = mc_dropout_posterior(&model, &inputs, 5, 0.0, 3).unwrap();
        let exact = model.predict_proba(&inputs).unwrap();
        for s in &post.sample_probs {
            assert_eq!(s, &exact);
        }
        for (a, b) in post.mean_probs.data().iter().zip(exact.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn rows_are_distributions_and_passes_vary() {
        let (model, inputs) = trained();
        for seed in 0..3 {
            let post = mc_dropout_posterior(&model, &inputs, 20, 0.5, seed).unwrap();
            assert_eq!(post.num_samples(), 20);
            for m in post.sample_probs.iter().chain([&post.mean_probs]) {
                for i in 0..m.rows() {
                    assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
            let variance: f64 = (0..post.mean_probs.data().len())
                .map(|k| {
                    let mean = post.mean_probs.data()[k];
                    post.sample_probs.iter().map(|s| (s.data()[k] - mean).powi(2)).sum::<f64>()
                })
                .sum();
            assert!(variance > 0.0);
            assert_eq!(post, mc_dropout_posterior(&model, &inputs, 20, 0.5, seed).unwrap());
        }
    }

    #[test]
    fn zero_passes_rejected() {
        let (model, inputs) = trained();
        assert!(mc_dropout_posterior(&model, &inputs, 0, 0.5, 0).is_err());
    }
}
