use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{evaluate, MetricsReport};
use crate::data::InteractionSample;
use crate::embedding::FeatureSchema;
use crate::train::{train, TrainConfig};
use crate::{Error, Result};

/// A training setting a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Weight of the twin-tower KL term.
    Kl,
    /// Weight of the global-domain cart loss.
    CtcarGlobal,
    Ctcar,
    Ctcvr,
    Lr,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Kl => "kl",
            SweepParameter::CtcarGlobal => "ctcar_global",
            SweepParameter::Ctcar => "ctcar",
            SweepParameter::Ctcvr => "ctcvr",
            SweepParameter::Lr => "lr",
        }
    }

    pub fn apply(self, config: &mut TrainConfig, value: f64) {
        match self {
            SweepParameter::Kl => config.weights.kl = value,
            SweepParameter::CtcarGlobal => config.weights.ctcar_global = value,
            SweepParameter::Ctcar => config.weights.ctcar = value,
            SweepParameter::Ctcvr => config.weights.ctcvr = value,
            SweepParameter::Lr => config.lr = value,
        }
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "kl" => SweepParameter::Kl,
            "ctcar_global" => SweepParameter::CtcarGlobal,
            "ctcar" => SweepParameter::Ctcar,
            "ctcvr" => SweepParameter::Ctcvr,
            "lr" => SweepParameter::Lr,
            other => return Err(Error::Config(format!("unknown sweep parameter `{other}`"))),
        })
    }
}

/// One parameter and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

impl SweepGrid {
    pub fn new(parameter: SweepParameter, values: Vec<f64>) -> Self {
        Self { parameter, values }
    }

    /// `{0.01, 0.05, 0.1, 0.5, 1.0}` for the KL weight.
    pub fn kl() -> Self {
        Self::new(SweepParameter::Kl, vec![0.01, 0.05, 0.1, 0.5, 1.0])
    }

    /// `{0.1, 0.3, 0.5, 0.7, 1.0}` for the global-domain cart weight.
    pub fn ctcar_global() -> Self {
        Self::new(SweepParameter::CtcarGlobal, vec![0.1, 0.3, 0.5, 0.7, 1.0])
    }
}

/// One long-format result row. Metric columns are empty when the run failed
/// or the metric was unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub parameter: String,
    pub value: f64,
    pub seed: u64,
    pub ctr_auc: Option<f64>,
    pub ctcvr_auc: Option<f64>,
    pub cvr_auc: Option<f64>,
    pub good_case_cvr_auc: Option<f64>,
    pub bad_case_cvr_auc: Option<f64>,
    pub twin_distance: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub const COLUMNS: [&'static str; 11] = [
        "variant",
        "parameter",
        "value",
        "seed",
        "ctr_auc",
        "ctcvr_auc",
        "cvr_auc",
        "good_case_cvr_auc",
        "bad_case_cvr_auc",
        "twin_distance",
        "error",
    ];

    /// Tab-separated cells in [`Self::COLUMNS`] order.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        [
            self.variant.clone(),
            self.parameter.clone(),
            format!("{}", self.value),
            self.seed.to_string(),
            opt(self.ctr_auc),
            opt(self.ctcvr_auc),
            opt(self.cvr_auc),
            opt(self.good_case_cvr_auc),
            opt(self.bad_case_cvr_auc),
            opt(self.twin_distance),
            self.error.clone().unwrap_or_default().replace(['\t', '\n'], " "),
        ]
        .join("\t")
    }

    fn from_run(config: &TrainConfig, grid: &SweepGrid, value: f64, seed: u64, run: Result<(MetricsReport, Option<f64>)>) -> Self {
        let mut row = SweepRow {
            variant: config.model.variant.name().to_string(),
            parameter: grid.parameter.name().to_string(),
            value,
            seed,
            ctr_auc: None,
            ctcvr_auc: None,
            cvr_auc: None,
            good_case_cvr_auc: None,
            bad_case_cvr_auc: None,
            twin_distance: None,
            error: None,
        };
        match run {
            Ok((m, twin)) => {
                row.ctr_auc = m.ctr_auc;
                row.ctcvr_auc = m.ctcvr_auc;
                row.cvr_auc = m.cvr_auc;
                row.good_case_cvr_auc = m.cases.good_case.cvr_auc;
                row.bad_case_cvr_auc = m.cases.bad_case.cvr_auc;
                row.twin_distance = twin;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    }
}

/// Trains and evaluates every `(value, seed)` pair. `seed` replaces both the
/// initialisation and the batch-order seed of `base`. Failed runs become rows
/// carrying their error. Rows come back value-major, seed-minor, whatever
/// the number of `workers`.
pub fn sweep(
    base: &TrainConfig,
    grid: &SweepGrid,
    seeds: &[u64],
    schema: &FeatureSchema,
    train_samples: &[InteractionSample],
    test_samples: &[InteractionSample],
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if grid.values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep grid and seed list must be nonempty".into()));
    }
    let jobs: Vec<(f64, u64)> = grid
        .values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |(value, seed): (f64, u64)| -> SweepRow {
        let mut config = base.clone().with_seed(seed);
        grid.parameter.apply(&mut config, value);
        let result = train(&config, schema, train_samples).and_then(|out| {
            let metrics = evaluate(&out.model, test_samples)?;
            Ok((metrics, out.model.twin_distance()))
        });
        SweepRow::from_run(&config, grid, value, seed, result)
    };
    let workers = workers.clamp(1, jobs.len());
    if workers == 1 {
        return Ok(jobs.into_iter().map(run).collect());
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&job) = jobs.get(i) else { break };
                let row = run(job);
                slots.lock().expect("sweep worker panicked")[i] = Some(row);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("sweep worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect())
}
