//! Training of the quantization head: minibatch momentum SGD over the explicit gradients.

mod backprop;
mod gradcheck;
mod model;
mod optim;

use std::io::Write;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backprop::{
    backward, forward, grad_entropy, grad_soft_quantization, softmax_jacobian_apply, ForwardCache,
    Gradients, SubspaceCache,
};
pub use gradcheck::{compare_gradients, grad_check, relative_error, GradCheckReport};
pub use model::{random_codebooks, CodebookMode, ModelParams, MODEL_MAGIC, MODEL_VERSION};
pub use optim::{sgd_step, LrSchedule, OptimizerState};

use crate::codebook::{generate_orthonormal_codebooks, CodebookSet, CodebookSpec};
use crate::data_io::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::metric_loss::Hyperparams;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Bottleneck dimension `D`; must be divisible by `m_books`.
    pub feature_dim: usize,
    pub m_books: usize,
    pub k_words: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hp: Hyperparams,
    pub seed: u64,
    pub mode: CodebookMode,
    /// Keep the classification term on the original sub-vectors.
    pub include_lx: bool,
    /// Use a fixed identity encoder (requires input dim == `feature_dim`).
    pub identity_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            m_books: 2,
            k_words: 16,
            epochs: 200,
            batch_size: 256,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            hp: Hyperparams::default(),
            seed: 0,
            mode: CodebookMode::Predefined,
            include_lx: true,
            identity_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn codebook_spec(&self) -> Result<CodebookSpec> {
        CodebookSpec::for_feature_dim(self.feature_dim, self.m_books, self.k_words)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.schedule.initial > 0.0 && self.schedule.decay > 0.0) || self.schedule.period == 0 {
            return Err(Error::Config("learning-rate schedule must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        self.hp.validate()?;
        self.codebook_spec()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_clf: f64,
    pub loss_ent: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "epoch,lr,loss_total,loss_clf,loss_ent,train_acc")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?},{:?}",
                r.epoch, r.lr, r.loss_total, r.loss_clf, r.loss_ent, r.train_acc
            )?;
        }
        Ok(())
    }
}

/// Trains with codebooks chosen by the mode: the orthonormal construction, or random
/// unit codewords for l2q.
pub fn train(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    let spec = config.codebook_spec()?;
    let codebooks = match config.mode {
        CodebookMode::Predefined => generate_orthonormal_codebooks(&spec),
        CodebookMode::L2q => {
            // Separate stream so the head initialization matches the predefined run.
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6c32_7100);
            random_codebooks(&spec, &mut rng)?
        }
    };
    train_with_codebooks(dataset, config, codebooks)
}

/// Trains with caller-supplied starting codebooks (e.g. a perturbed set).
pub fn train_with_codebooks(
    dataset: &EmbeddingDataset,
    config: &TrainConfig,
    mut codebooks: CodebookSet,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    let spec = config.codebook_spec()?;
    if *codebooks.spec() != spec {
        return Err(Error::Config(format!(
            "codebooks {:?} do not match the configured {:?}",
            codebooks.spec(),
            spec
        )));
    }
    if dataset.classes() < 2 {
        return Err(Error::Config("training needs at least 2 classes".into()));
    }
    if config.mode == CodebookMode::L2q {
        codebooks.set_orthonormal(false);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(
        dataset.dim(),
        codebooks,
        dataset.classes(),
        config.mode,
        config.identity_encoder,
        &mut rng,
    )?;
    let mut state = OptimizerState::new(&params, config.momentum, config.weight_decay, config.schedule.initial);
    state.update_encoder = !config.identity_encoder;

    let labels: Vec<usize> = dataset.labels().iter().map(|&l| l as usize).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        state.lr = config.schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut total, mut clf, mut ent, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| dataset.row(i)).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, cache) = forward(&params, &inputs, &batch_labels, &config.hp, config.include_lx)?;
            let grads = backward(&params, &cache)?;
            sgd_step(&mut params, &grads, &mut state)?;

            let n = chunk.len() as f64;
            total += loss.total * n;
            clf += loss.l_clf * n;
            ent += loss.l_ent * n;
            correct += cache.correct();
        }
        let n = dataset.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: state.lr,
            loss_total: total / n,
            loss_clf: clf / n,
            loss_ent: ent / n,
            train_acc: correct as f64 / n,
        };
        debug!(
            "epoch {} lr {} loss {:.5} acc {:.4}",
            record.epoch, record.lr, record.loss_total, record.train_acc
        );
        if !record.loss_total.is_finite() {
            return Err(Error::Degenerate(format!("loss diverged at epoch {}", record.epoch)));
        }
        log.epochs.push(record);
    }
    Ok((params, log))
}
