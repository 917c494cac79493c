//! Model variants: the ESMC family, ESMM/ESMM² and the Shared Bottom / MMoE
//! baselines. Every variant reads the same shared embedding tables and
//! returns a [`PredictionBundle`] per sample.

mod bundle;
mod checkpoint;
mod network;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingGrad, EmbeddingTables, FeatureSchema};
use crate::nn::{Activation, DenseLayer, Mlp, Parameters, DEFAULT_LEAKY_SLOPE};
use crate::{Error, Result};

pub use bundle::{Composition, PredictionBundle};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{HeadGrads, Heads, NetCache, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SharedBottom,
    Esmm,
    Mmoe,
    Esmm2,
    Esmc,
    Esms,
    Esmc2,
    Esms2,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::SharedBottom,
        Variant::Esmm,
        Variant::Mmoe,
        Variant::Esmm2,
        Variant::Esmc,
        Variant::Esms,
        Variant::Esmc2,
        Variant::Esms2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SharedBottom => "shared-bottom",
            Variant::Esmm => "esmm",
            Variant::Mmoe => "mmoe",
            Variant::Esmm2 => "esmm2",
            Variant::Esmc => "esmc",
            Variant::Esms => "esms",
            Variant::Esmc2 => "esmc2",
            Variant::Esms2 => "esms2",
        }
    }

    /// Twin CAR/CVR towers tied by the parameter KL.
    pub fn has_twin_towers(self) -> bool {
        matches!(self, Variant::Esmc | Variant::Esmc2)
    }

    /// Adds the cart loss over global-domain samples.
    pub fn uses_global_cart(self) -> bool {
        matches!(self, Variant::Esmc2 | Variant::Esms2)
    }

    /// Trains a cart task.
    pub fn has_cart_task(self) -> bool {
        !matches!(self, Variant::SharedBottom | Variant::Esmm | Variant::Mmoe)
    }

    /// Baselines whose CVR head is fitted on clicked samples only.
    pub fn clicked_space_cvr(self) -> bool {
        matches!(self, Variant::SharedBottom | Variant::Mmoe)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let v = match key.as_str() {
            "sharedbottom" => Variant::SharedBottom,
            "esmm" => Variant::Esmm,
            "mmoe" => Variant::Mmoe,
            "esmm2" => Variant::Esmm2,
            "esmc" => Variant::Esmc,
            "esms" => Variant::Esms,
            "esmc2" => Variant::Esmc2,
            "esms2" => Variant::Esms2,
            _ => return Err(Error::Config(format!("unknown model variant `{s}`"))),
        };
        Ok(v)
    }
}

/// Architecture of a model. Loss weights live with the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Hidden widths of every tower in the tower-based variants.
    pub tower_hidden: Vec<usize>,
    /// Widths of the shared bottom / each MMoE expert; the last one is the
    /// representation width fed to the task heads.
    pub bottom_hidden: Vec<usize>,
    /// Hidden widths of the task heads on top of the bottom / mixture.
    pub head_hidden: Vec<usize>,
    pub experts: usize,
    pub leaky_slope: f64,
    /// Start the twin towers from identical parameters.
    pub tie_twin_init: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Esmc,
            tower_hidden: vec![64, 32],
            bottom_hidden: vec![64],
            head_hidden: vec![32],
            experts: 2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            tie_twin_init: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        Activation::LeakyRelu(self.leaky_slope).validate()?;
        let all = self
            .tower_hidden
            .iter()
            .chain(&self.bottom_hidden)
            .chain(&self.head_hidden);
        if all.clone().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if matches!(self.variant, Variant::SharedBottom | Variant::Mmoe) && self.bottom_hidden.is_empty() {
            return Err(Error::Config("bottom_hidden needs at least one layer".into()));
        }
        if self.variant == Variant::Mmoe && self.experts == 0 {
            return Err(Error::Config("MMoE needs at least one expert".into()));
        }
        Ok(())
    }
}

// Independent random streams so that adding a component never shifts the
// initialisation of another.
const STREAM_EMBEDDING: u64 = 0;
const STREAM_CTR: u64 = 1;
const STREAM_CAR: u64 = 2;
const STREAM_CVR: u64 = 3;
const STREAM_COND: u64 = 4;
const STREAM_BOTTOM: u64 = 5;
const STREAM_GATES: u64 = 6;
const STREAM_EXPERTS: u64 = 16;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Activations of one forward pass, needed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub heads: Heads,
    net: NetCache,
}

/// Shared embedding tables plus the variant's towers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    schema: FeatureSchema,
    embeddings: EmbeddingTables,
    network: Network,
}

/// Gradient buffers for a [`Model`]: row-sparse for embeddings, dense for towers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: EmbeddingGrad,
    pub network: Network,
}

impl Gradients {
    /// Dense gradients in the same group order as [`Model::param_groups`].
    pub fn to_dense(&self, schema: &FeatureSchema) -> Vec<Vec<f64>> {
        let mut out = self.embedding.to_dense(schema);
        let mut groups = Vec::new();
        self.network.groups(&mut groups);
        out.extend(groups.into_iter().map(|(_, g)| g.to_vec()));
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.embedding.scale(factor);
        let mut groups = Vec::new();
        self.network.groups_mut(&mut groups);
        for (_, g) in groups {
            for v in g {
                *v *= factor;
            }
        }
    }

    /// `(car, cvr)` gradient buffers of the twin towers.
    pub fn twin_towers_mut(&mut self) -> Option<(&mut Mlp, &mut Mlp)> {
        match &mut self.network {
            Network::TwinTower { car, cvr, .. } => Some((car, cvr)),
            _ => None,
        }
    }
}

impl Model {
    /// Builds a seeded, freshly initialised model.
    pub fn new(config: ModelConfig, schema: FeatureSchema) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let seed = config.seed;
        let input = schema.total_dim();
        let leaky = Activation::LeakyRelu(config.leaky_slope);
        let tower = |id: u64| -> Result<Mlp> {
            Mlp::build(input, &config.tower_hidden, 1, leaky, Activation::Sigmoid, &mut stream(seed, id))
        };
        let bottom = |id: u64| -> Result<Mlp> {
            let (last, hidden) = config.bottom_hidden.split_last().expect("validated");
            Mlp::build(input, hidden, *last, leaky, leaky, &mut stream(seed, id))
        };
        let rep = config.bottom_hidden.last().copied().unwrap_or(0);
        let head = |id: u64| -> Result<Mlp> {
            Mlp::build(rep, &config.head_hidden, 1, leaky, Activation::Sigmoid, &mut stream(seed, id))
        };
        let network = match config.variant {
            Variant::Esmm => Network::Esmm {
                ctr: tower(STREAM_CTR)?,
                cvr: tower(STREAM_CVR)?,
            },
            Variant::Esmm2 => Network::Esmm2 {
                ctr: tower(STREAM_CTR)?,
                car: tower(STREAM_CAR)?,
                cvr: tower(STREAM_CVR)?,
            },
            Variant::Esmc | Variant::Esmc2 => {
                let car = tower(STREAM_CAR)?;
                let cvr = if config.tie_twin_init {
                    car.clone()
                } else {
                    tower(STREAM_CVR)?
                };
                Network::TwinTower {
                    ctr: tower(STREAM_CTR)?,
                    car,
                    cvr,
                }
            }
            Variant::Esms | Variant::Esms2 => Network::Siamese {
                ctr: tower(STREAM_CTR)?,
                cond: tower(STREAM_COND)?,
            },
            Variant::SharedBottom => Network::SharedBottom {
                bottom: bottom(STREAM_BOTTOM)?,
                ctr_head: head(STREAM_CTR)?,
                cvr_head: head(STREAM_CVR)?,
            },
            Variant::Mmoe => {
                let experts = (0..config.experts as u64)
                    .map(|e| bottom(STREAM_EXPERTS + e))
                    .collect::<Result<Vec<_>>>()?;
                let mut rng = stream(seed, STREAM_GATES);
                Network::Mmoe {
                    experts,
                    ctr_gate: DenseLayer::xavier(input, config.experts, Activation::Identity, &mut rng)?,
                    cvr_gate: DenseLayer::xavier(input, config.experts, Activation::Identity, &mut rng)?,
                    ctr_tower: head(STREAM_CTR)?,
                    cvr_tower: head(STREAM_CVR)?,
                }
            }
        };
        let embeddings = EmbeddingTables::init(&schema, &mut stream(seed, STREAM_EMBEDDING));
        Self::from_parts(config, schema, embeddings, network)
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        schema: FeatureSchema,
        embeddings: EmbeddingTables,
        network: Network,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        if !embeddings.matches(&schema) {
            return Err(Error::Schema("embedding tables do not match the schema".into()));
        }
        let kind_ok = matches!(
            (config.variant, &network),
            (Variant::SharedBottom, Network::SharedBottom { .. })
                | (Variant::Mmoe, Network::Mmoe { .. })
                | (Variant::Esmm, Network::Esmm { .. })
                | (Variant::Esmm2, Network::Esmm2 { .. })
                | (Variant::Esmc | Variant::Esmc2, Network::TwinTower { .. })
                | (Variant::Esms | Variant::Esms2, Network::Siamese { .. })
        );
        if !kind_ok {
            return Err(Error::Config(format!(
                "network layout does not belong to variant {}",
                config.variant
            )));
        }
        network.validate(schema.total_dim())?;
        Ok(Self {
            config,
            schema,
            embeddings,
            network,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn embeddings(&self) -> &EmbeddingTables {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut EmbeddingTables {
        &mut self.embeddings
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn composition(&self) -> Composition {
        match self.config.variant {
            Variant::SharedBottom | Variant::Mmoe => Composition::Independent,
            Variant::Esmm => Composition::TwoFactor,
            Variant::Esmm2 => Composition::Chain,
            _ => Composition::Parallel,
        }
    }

    pub fn bundle(&self, heads: &Heads) -> PredictionBundle {
        match (self.composition(), heads.car) {
            (Composition::Chain, Some(car)) => PredictionBundle::chain(heads.ctr, car, heads.cvr),
            (Composition::Parallel, Some(car)) => PredictionBundle::parallel(heads.ctr, car, heads.cvr),
            (Composition::TwoFactor, _) => PredictionBundle::two_factor(heads.ctr, heads.cvr),
            _ => PredictionBundle::independent(heads.ctr, heads.cvr),
        }
    }

    /// Forward pass for one sample's feature ids.
    pub fn forward(&self, feature_ids: &[u32]) -> Result<(PredictionBundle, ForwardCache)> {
        let x = self.embeddings.embed(&self.schema, feature_ids)?;
        let (heads, net) = self.network.forward(&x)?;
        Ok((self.bundle(&heads), ForwardCache { heads, net }))
    }

    pub fn predict_one(&self, feature_ids: &[u32]) -> Result<PredictionBundle> {
        Ok(self.forward(feature_ids)?.0)
    }

    pub fn predict<'a, I>(&self, batch: I) -> Result<Vec<PredictionBundle>>
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        batch.into_iter().map(|ids| self.predict_one(ids)).collect()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            embedding: EmbeddingGrad::new(),
            network: self.network.zeros_like(),
        }
    }

    /// Backpropagates head gradients for one sample into `grads`.
    pub fn backward(
        &self,
        feature_ids: &[u32],
        cache: &ForwardCache,
        head_grads: &HeadGrads,
        grads: &mut Gradients,
    ) -> Result<()> {
        let dx = self.network.backward(&cache.net, head_grads, &mut grads.network)?;
        grads.embedding.accumulate(&self.schema, feature_ids, &dx)
    }

    /// `(car, cvr)` towers of the twin-tower variants.
    pub fn twin_towers(&self) -> Option<(&Mlp, &Mlp)> {
        match &self.network {
            Network::TwinTower { car, cvr, .. } => Some((car, cvr)),
            _ => None,
        }
    }

    /// Euclidean distance between the flattened twin towers.
    pub fn twin_distance(&self) -> Option<f64> {
        self.twin_towers().map(|(a, b)| {
            a.flatten()
                .iter()
                .zip(b.flatten())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_groups().iter().map(|(_, g)| g.len()).sum()
    }
}

impl Parameters for Model {
    fn param_groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.embeddings.groups(&self.schema, &mut out);
        self.network.groups(&mut out);
        out
    }

    fn param_groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.embeddings.groups_mut(&self.schema, &mut out);
        self.network.groups_mut(&mut out);
        out
    }
}
