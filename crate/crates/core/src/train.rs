//! Mini-batch training loop and the calibration ablation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_and_calibrate, split_by_session, InteractionSample};
use crate::embedding::FeatureSchema;
use crate::eval::{evaluate, MetricsReport};
use crate::model::{Gradients, Model, ModelConfig, Variant};
use crate::nn::{adagrad_step, AdagradState, LrSchedule, DEFAULT_DECAY, DEFAULT_EPSILON};
use crate::objective::{KlMode, LossBreakdown, LossWeights, Objective};
use crate::{Error, Result};

const STREAM_SHUFFLE: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub kl_mode: KlMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    /// Seeds the batch order. Parameter initialisation uses `model.seed`.
    pub seed: u64,
    pub shuffle: bool,
    pub adagrad_decay: f64,
    pub adagrad_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            kl_mode: KlMode::default(),
            lr: 0.005,
            batch_size: 1024,
            epochs: 1,
            warmup_steps: 1000,
            seed: 0,
            shuffle: true,
            adagrad_decay: DEFAULT_DECAY,
            adagrad_epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    /// Default protocol for `variant`, with loss weights valid for it.
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            model: ModelConfig::new(variant),
            weights: LossWeights::for_variant(variant),
            ..Self::default()
        }
    }

    /// Settings for the small synthetic datasets: smaller towers, a short
    /// warm-up and several epochs.
    pub fn desk(variant: Variant) -> Self {
        let mut c = Self::for_variant(variant);
        c.model.tower_hidden = vec![32, 16];
        c.model.bottom_hidden = vec![32];
        c.model.head_hidden = vec![16];
        c.lr = 0.02;
        c.batch_size = 512;
        c.epochs = 3;
        c.warmup_steps = 50;
        c
    }

    /// Sets both the initialisation and the batch-order seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate(self.model.variant)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        LrSchedule::new(self.lr, self.warmup_steps)?;
        AdagradState::new(0, self.adagrad_decay, self.adagrad_epsilon)?;
        Ok(())
    }

    pub fn steps_for(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size) * self.epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<TrainLogRecord>,
}

/// Adagrad states for every dense group and every embedding table.
struct Optimizer {
    dense: Vec<AdagradState>,
    sparse: Vec<AdagradState>,
    schedule: LrSchedule,
}

impl Optimizer {
    fn new(model: &Model, config: &TrainConfig) -> Result<Self> {
        let mut groups = Vec::new();
        model.network().groups(&mut groups);
        let state = |len| AdagradState::new(len, config.adagrad_decay, config.adagrad_epsilon);
        Ok(Self {
            dense: groups.iter().map(|(_, g)| state(g.len())).collect::<Result<_>>()?,
            sparse: model
                .embeddings()
                .tables()
                .iter()
                .map(|t| state(t.data().len()))
                .collect::<Result<_>>()?,
            schedule: LrSchedule::new(config.lr, config.warmup_steps)?,
        })
    }

    /// Applies one step, or touches nothing if any gradient is non-finite.
    fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let mut g = Vec::new();
        grads.network.groups(&mut g);
        if let Some((name, _)) = g.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient { group: name.clone() });
        }
        if let Some(((field, _), _)) = grads.embedding.rows().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient {
                group: format!("embedding.{}", model.schema().fields()[*field].name),
            });
        }
        let mut p = Vec::new();
        model.network_mut().groups_mut(&mut p);
        for (((_, params), (_, grad)), state) in p.into_iter().zip(&g).zip(&mut self.dense) {
            adagrad_step(params, grad, state, &self.schedule)?;
        }
        model
            .embeddings_mut()
            .apply_sparse(&grads.embedding, &mut self.sparse, &self.schedule)
    }
}

/// Trains a freshly initialised model.
pub fn train(config: &TrainConfig, schema: &FeatureSchema, samples: &[InteractionSample]) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(config.model.clone(), schema.clone())?;
    train_from(model, config, samples)
}

/// Trains `model` in place of a fresh initialisation.
pub fn train_from(mut model: Model, config: &TrainConfig, samples: &[InteractionSample]) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if model.variant() != config.model.variant {
        return Err(Error::Config(format!(
            "model is {} but the configuration trains {}",
            model.variant(),
            config.model.variant
        )));
    }
    let objective = Objective::new(config.model.variant, config.weights.clone(), config.kl_mode)?;
    let mut opt = Optimizer::new(&model, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.steps_for(samples.len()));
    let mut step = 0usize;
    for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&InteractionSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut grads = model.zero_grads();
            let loss = objective.value_and_grad(&model, &batch, &mut grads)?;
            let abort = |reason: String, model: &Model| Error::Training {
                step,
                reason,
                last_good: Some(Box::new(model.clone())),
            };
            if !loss.is_finite() {
                return Err(abort(format!("non-finite loss {loss:?}"), &model));
            }
            match opt.step(&mut model, &grads) {
                Ok(()) => {}
                Err(e @ Error::NonFiniteGradient { .. }) => return Err(abort(e.to_string(), &model)),
                Err(e) => return Err(e),
            }
            log.push(TrainLogRecord {
                step,
                lr: opt.schedule.lr_at(step as u64),
                loss,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Paired evaluation with and without sample calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub boundary: u32,
    /// Trained on calibrated samples (tagged `ESMC`).
    pub calibrated: MetricsReport,
    /// Trained on raw samples (tagged `ESMC-`).
    pub raw: MetricsReport,
    /// The two runs ended with identical parameters.
    pub identical: bool,
}

impl AblationReport {
    pub fn rows(&self) -> [(&'static str, &MetricsReport); 2] {
        [("ESMC", &self.calibrated), ("ESMC-", &self.raw)]
    }
}

/// Splits `raw` at `boundary`, trains once on the calibrated and once on the
/// raw training side with the same seed, and evaluates both on the
/// calibrated test side.
pub fn ablate_calibration(
    config: &TrainConfig,
    schema: &FeatureSchema,
    raw: &[InteractionSample],
    boundary: u32,
) -> Result<AblationReport> {
    let (calibrated, _) = split_and_calibrate(raw, boundary)?;
    let raw_split = split_by_session(raw, boundary)?;
    let with = train(config, schema, &calibrated.train)?.model;
    let without = train(config, schema, &raw_split.train)?.model;
    Ok(AblationReport {
        boundary,
        calibrated: evaluate(&with, &calibrated.test)?,
        raw: evaluate(&without, &calibrated.test)?,
        identical: with == without,
    })
}
