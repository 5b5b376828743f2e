//! Mini-batch Adam training with early stopping on dev standardized
//! perplexity.

use super::{backward, forward, loss_internal, CdestModel, CdestParameters, Mode, ModelDims, Scalar};
use crate::corpus::{CorpusSplit, Observation};
use crate::discretize::{bin_index, DiscretizerConfig};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Model and optimizer settings. Architecture defaults follow the reported
/// winners (embedding 16, hidden 128, dropout 0.5); optimizer defaults are
/// conventional Adam settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdestConfig {
    pub discretizer: DiscretizerConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Drop probability for the GRU-output and ReLU-output dropout.
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl CdestConfig {
    pub fn new(discretizer: DiscretizerConfig) -> Self {
        Self {
            discretizer,
            embed_dim: 16,
            hidden_dim: 128,
            dropout: 0.5,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 512,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embed_dim and hidden_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One training-log line: `epoch<TAB>train_loss<TAB>dev_pp<TAB>dev_pp_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_pp: f64,
    pub dev_pp_std: f64,
}

impl EpochLog {
    pub fn tsv_header() -> &'static str {
        "epoch\ttrain_loss\tdev_pp\tdev_pp_std"
    }

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.epoch, self.train_loss, self.dev_pp, self.dev_pp_std
        )
    }
}

struct Adam {
    m: CdestParameters<f32>,
    v: CdestParameters<f32>,
    step: u64,
}

impl Adam {
    fn new(params: &CdestParameters<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut CdestParameters<f32>,
        grads: &CdestParameters<f32>,
        scale: f32,
        config: &CdestConfig,
    ) {
        self.step += 1;
        let b1 = config.beta1 as f32;
        let b2 = config.beta2 as f32;
        let lr = config.learning_rate as f32;
        let eps = config.epsilon as f32;
        let bc1 = 1.0 - (config.beta1 as f32).powi(self.step as i32);
        let bc2 = 1.0 - (config.beta2 as f32).powi(self.step as i32);
        let p_blocks = params.blocks_mut();
        let g_blocks = grads.blocks();
        let m_blocks = self.m.blocks_mut();
        let v_blocks = self.v.blocks_mut();
        for (((pb, gb), mb), vb) in p_blocks
            .into_iter()
            .zip(g_blocks)
            .zip(m_blocks)
            .zip(v_blocks)
        {
            for (((p, &g), m), v) in pb.iter_mut().zip(gb.iter()).zip(mb.iter_mut()).zip(vb.iter_mut())
            {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn bin_targets(obs: &Observation, config: &DiscretizerConfig) -> Result<[Vec<f32>; 3]> {
    let blurred = config.discretize_point(&obs.color)?;
    Ok(std::array::from_fn(|c| {
        blurred[c].masses().iter().map(|&m| m as f32).collect()
    }))
}

/// Base-2 perplexity of the current parameters on a split, via one-hot bin
/// selection on the three heads.
fn parameters_perplexity<F: Scalar>(
    params: &CdestParameters<F>,
    observations: &[Observation],
    resolution: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for obs in observations {
        let cache = forward(params, &obs.tokens, Mode::Infer, 0.0, &mut rng)?;
        let probs = cache.predictions();
        let mut p = 1.0f64;
        for (c, channel) in [obs.color.h, obs.color.s, obs.color.v].into_iter().enumerate() {
            let bin = bin_index(channel, resolution)?;
            p *= probs[c][bin - 1].into_f64();
        }
        if p <= 0.0 || !p.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-positive probability {p} for {:?}",
                obs.description
            )));
        }
        let y = p.log2() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    Ok((-sum / observations.len() as f64).exp2())
}

/// Trains on the split's train portion, evaluating dev standardized
/// perplexity after every epoch and keeping the best-dev parameters.
/// Fully reproducible from `config.seed`.
pub fn train(split: &CorpusSplit, config: &CdestConfig) -> Result<(CdestModel, Vec<EpochLog>)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let vocab = split.vocabulary.len();
    for obs in split.train.iter().chain(&split.dev).chain(&split.test) {
        if obs.tokens.iter().any(|&t| t >= vocab) {
            return Err(Error::Config(format!(
                "observation {:?} has token indices outside the vocabulary",
                obs.description
            )));
        }
    }

    let resolution = config.discretizer.resolution;
    let dims = ModelDims {
        vocab,
        embed: config.embed_dim,
        hidden: config.hidden_dim,
        resolution,
    };
    let n3 = (resolution as f64).powi(3);

    let targets: Vec<[Vec<f32>; 3]> = split
        .train
        .iter()
        .map(|o| bin_targets(o, &config.discretizer))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: CdestParameters<f32> = CdestParameters::init(dims, &mut rng);
    let mut adam = Adam::new(&params);
    let mut grads = params.zeros_like();

    let mut best_params = params.clone();
    let mut best_metric = f64::INFINITY;
    let mut stale = 0usize;
    let mut logs = Vec::new();

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            for block in grads.blocks_mut() {
                block.fill(0.0);
            }
            for &idx in chunk {
                let obs = &split.train[idx];
                let cache = forward(&params, &obs.tokens, Mode::Train, config.dropout, &mut rng)?;
                let l = loss_internal(cache.predictions(), &targets[idx]) as f64;
                if !l.is_finite() {
                    return Err(Error::TrainingFailure {
                        epoch,
                        batch: batch_no,
                        message: format!("non-finite loss {l}"),
                    });
                }
                epoch_loss += l;
                backward(&params, &cache, &targets[idx], &mut grads)?;
            }
            adam.update(&mut params, &grads, 1.0 / chunk.len() as f32, config);
            if !params.all_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    batch: batch_no,
                    message: "non-finite parameter after update".into(),
                });
            }
        }
        let train_loss = epoch_loss / split.train.len() as f64;

        let (dev_pp, dev_pp_std, metric) = if split.dev.is_empty() {
            (f64::NAN, f64::NAN, train_loss)
        } else {
            let pp = parameters_perplexity(&params, &split.dev, resolution)?;
            (pp, pp / n3, pp / n3)
        };
        logs.push(EpochLog {
            epoch,
            train_loss,
            dev_pp,
            dev_pp_std,
        });

        if metric < best_metric {
            best_metric = metric;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                break;
            }
        }
    }

    Ok((
        CdestModel {
            params: best_params,
            vocabulary: split.vocabulary.clone(),
            discretizer: config.discretizer,
        },
        logs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::generate_synthetic;
    use crate::corpus::{ColorPoint, CorpusSplit, Observation, Vocabulary};
    use crate::discretize::BlurMode;

    fn one_observation_split() -> CorpusSplit {
        let vocabulary = Vocabulary::from_tokens(["dark", "blue"]);
        let obs = Observation {
            description: "dark blue".into(),
            tokens: vec![0, 1],
            color: ColorPoint::new(0.6, 0.7, 0.25).unwrap(),
        };
        CorpusSplit {
            train: vec![obs],
            dev: vec![],
            test: vec![],
            vocabulary,
        }
    }

    fn small_config(resolution: usize) -> CdestConfig {
        let mut c = CdestConfig::new(DiscretizerConfig::with_resolution(resolution).unwrap());
        c.embed_dim = 4;
        c.hidden_dim = 8;
        c.dropout = 0.0;
        c.max_epochs = 5;
        c.seed = 13;
        c
    }

    #[test]
    fn loss_decreases_on_single_observation() {
        let split = one_observation_split();
        let mut config = small_config(8);
        config.learning_rate = 0.05;
        config.max_epochs = 10;
        let (_, logs) = train(&split, &config).unwrap();
        assert!(logs.last().unwrap().train_loss < logs[0].train_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = generate_synthetic(3, 3, 1, 40).unwrap();
        let config = small_config(8);
        let (a, _) = train(&corpus.full, &config).unwrap();
        let (b, _) = train(&corpus.full, &config).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn synthetic_dev_perplexity_beats_uniform_soundly() {
        let corpus = generate_synthetic(1, 5, 2, 500).unwrap();
        let mut config = small_config(16);
        config.embed_dim = 8;
        config.hidden_dim = 32;
        config.max_epochs = 30;
        config.batch_size = 256;
        config.patience = 5;
        let (_, logs) = train(&corpus.full, &config).unwrap();
        let final_std = logs.last().unwrap().dev_pp_std;
        assert!(final_std < 0.2, "dev standardized perplexity {final_std}");
    }

    #[test]
    fn dropout_is_not_applied_at_inference() {
        let corpus = generate_synthetic(5, 2, 1, 20).unwrap();
        let mut config = small_config(8);
        config.dropout = 0.5;
        let (model, _) = train(&corpus.full, &config).unwrap();
        let desc = &corpus.full.train[0].description;
        let a = super::super::predict(&model, desc).unwrap();
        let b = super::super::predict(&model, desc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let split = one_observation_split();
        let mut config = small_config(8);
        config.dropout = 1.0;
        assert!(train(&split, &config).is_err());
        let mut config = small_config(8);
        config.discretizer.hue_mode = BlurMode::Wrapped;
        config.hidden_dim = 0;
        assert!(train(&split, &config).is_err());
    }
}
