use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use esmc_core::data::{read_samples, split_and_calibrate, split_by_session, write_samples, InteractionSample};
use esmc_core::eval::{evaluate, sweep as run_sweep, MetricsReport, SweepGrid, SweepParameter, SweepRow};
use esmc_core::model::{load_checkpoint, save_checkpoint};
use esmc_core::simulator::{gap_oracle, EventKind, Link, Simulator, SimulatorConfig};
use esmc_core::train::{ablate_calibration, train as run_train, AblationReport};
use esmc_core::{FeatureSchema, Variant};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{AblateArgs, CalibrateArgs, EvalArgs, GapArgs, SimulateArgs, SweepArgs, TrainArgs, TrainFlags, UsageError};

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.paths.out_dir.clone(),
        }
    }

    fn dir(&self, sub: &str) -> anyhow::Result<PathBuf> {
        let d = self.root.join(sub);
        fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
        Ok(d)
    }

    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn apply_train_flags(cfg: &mut RunConfig, flags: &TrainFlags) -> anyhow::Result<()> {
    if let Some(v) = &flags.variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    if let Some(s) = flags.seed {
        cfg.training.seed = s;
        cfg.model.seed = s;
    }
    if let Some(e) = flags.epochs {
        cfg.training.epochs = e;
    }
    if let Some(lr) = flags.lr {
        cfg.training.lr = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(kl) = flags.kl {
        let mut w = cfg.weights();
        w.kl = kl;
        cfg.weights = Some(w);
    }
    cfg.train_config().validate()?;
    Ok(())
}

/// Reads a sample file and checks it was written for `schema`.
fn load_samples(path: &Path, schema: &FeatureSchema) -> anyhow::Result<Vec<InteractionSample>> {
    let (header, samples) = read_samples(path).with_context(|| format!("cannot read samples {}", path.display()))?;
    if header.schema_hash != schema.hash() {
        return Err(esmc_core::Error::Schema(format!(
            "{} was written for schema {}, the configuration describes {}",
            path.display(),
            header.schema_hash,
            schema.hash()
        ))
        .into());
    }
    Ok(samples)
}

#[derive(Serialize)]
struct Manifest {
    simulator: SimulatorConfig,
    schema: FeatureSchema,
    schema_hash: String,
    /// Link of click, cart-given-click and purchase-given-cart:
    /// `sigmoid(offset + affinity_strength * z)` or a constant.
    links: [Link; 3],
    exposures: usize,
    clicks: usize,
    carts: usize,
    purchases: usize,
    deferred_purchases: usize,
    click_rate: f64,
    purchase_rate: f64,
    purchase_given_cart: f64,
    samples_file: PathBuf,
}

pub fn simulate(mut cfg: RunConfig, a: SimulateArgs) -> anyhow::Result<()> {
    if let Some(s) = a.seed {
        cfg.simulator.seed = s;
    }
    if let Some(r) = a.rho {
        cfg.simulator.deferred_purchase_rate = r;
    }
    if let Some(u) = a.users {
        cfg.simulator.n_users = u;
    }
    cfg.simulator.validate()?;
    // the simulator defines its own schema
    cfg.schema = None;
    let layout = Layout::new(&cfg);
    cfg.echo(&layout.root)?;
    let sim = Simulator::new(cfg.simulator.clone())?;
    let log = sim.simulate();
    let samples = sim.samples(&log);
    let path = layout.dir("data")?.join("raw.samples");
    write_samples(&path, &sim.schema().hash(), &samples)?;
    let count = |k| log.count(k);
    let (exposures, clicks, carts, purchases) = (
        count(EventKind::Exposure),
        count(EventKind::Click),
        count(EventKind::Cart),
        count(EventKind::Purchase),
    );
    let ratio = |x: usize, n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    let manifest = Manifest {
        simulator: cfg.simulator.clone(),
        schema: sim.schema(),
        schema_hash: sim.schema().hash(),
        links: sim.links(),
        exposures,
        clicks,
        carts,
        purchases,
        deferred_purchases: samples.iter().filter(|s| s.purchase && !s.cart).count(),
        click_rate: ratio(clicks, exposures),
        purchase_rate: ratio(purchases, exposures),
        purchase_given_cart: ratio(purchases, carts),
        samples_file: path.clone(),
    };
    write_json(&layout.data("manifest.json"), &manifest)?;
    println!(
        "wrote {} samples to {} (click rate {:.5}, purchase rate {:.5}, purchase|cart {:.4})",
        samples.len(),
        path.display(),
        manifest.click_rate,
        manifest.purchase_rate,
        manifest.purchase_given_cart
    );
    Ok(())
}

pub fn calibrate(mut cfg: RunConfig, a: CalibrateArgs) -> anyhow::Result<()> {
    if let Some(b) = a.boundary {
        cfg.evaluation.boundary = b;
    }
    let layout = Layout::new(&cfg);
    let schema = cfg.schema()?;
    let input = a.input.unwrap_or_else(|| layout.data("raw.samples"));
    let raw = load_samples(&input, &schema)?;
    if raw.iter().any(|s| s.calibrated) {
        bail!(UsageError(anyhow::anyhow!("{} is already calibrated", input.display())));
    }
    let boundary = cfg.evaluation.boundary;
    let (split, stats) = split_and_calibrate(&raw, boundary)?;
    let raw_train = split_by_session(&raw, boundary)?.train;
    let dir = layout.dir("data")?;
    cfg.echo(&layout.root)?;
    let hash = schema.hash();
    write_samples(&dir.join("train.samples"), &hash, &split.train)?;
    write_samples(&dir.join("test.samples"), &hash, &split.test)?;
    write_samples(&dir.join("train_raw.samples"), &hash, &raw_train)?;
    write_json(&dir.join("calibration.json"), &stats)?;
    println!(
        "boundary {boundary}: {} train / {} test samples; train moved {} implicit {}; test moved {} implicit {}",
        split.train.len(),
        split.test.len(),
        stats.train.moved,
        stats.train.implicit,
        stats.test.moved,
        stats.test.implicit
    );
    Ok(())
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> anyhow::Result<()> {
    apply_train_flags(&mut cfg, &a.flags)?;
    let layout = Layout::new(&cfg);
    let schema = cfg.schema()?;
    let data = a.data.unwrap_or_else(|| layout.data("train.samples"));
    let samples = load_samples(&data, &schema)?;
    cfg.echo(&layout.root)?;
    let tc = cfg.train_config();
    eprintln!(
        "training {} on {} samples for {} steps",
        tc.model.variant,
        samples.len(),
        tc.steps_for(samples.len())
    );
    let outcome = match run_train(&tc, &schema, &samples) {
        Ok(o) => o,
        Err(esmc_core::Error::Training { step, reason, last_good }) => {
            if let Some(model) = last_good {
                let path = layout.dir("checkpoints")?.join("last_good.ckpt");
                save_checkpoint(&path, &model, &tc.weights)?;
                eprintln!("saved parameters before the failing step to {}", path.display());
            }
            bail!("training aborted at step {step}: {reason}");
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = layout.dir("checkpoints")?.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.model, &tc.weights)?;
    let log_path = layout.dir("logs")?.join("train_log.jsonl");
    let mut w = BufWriter::new(File::create(&log_path)?);
    for r in &outcome.log {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    if let Some(last) = outcome.log.last() {
        println!(
            "step {}: total {:.5} (ctr {:.5}, ctcar {:.5}, ctcvr {:.5}, kl {:.3e})",
            last.step, last.loss.total, last.loss.l_ctr, last.loss.l_ctcar, last.loss.l_ctcvr, last.loss.l_kl
        );
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn print_metrics(tag: &str, m: &MetricsReport) {
    println!(
        "{tag:<14} ctr {:>7}  ctcvr {:>7}  cvr {:>7}  good {:>7} ({}+/{}-)  bad {:>7} ({}+/{}-)",
        fmt_auc(m.ctr_auc),
        fmt_auc(m.ctcvr_auc),
        fmt_auc(m.cvr_auc),
        fmt_auc(m.cases.good_case.cvr_auc),
        m.cases.good_case.positives,
        m.cases.good_case.negatives,
        fmt_auc(m.cases.bad_case.cvr_auc),
        m.cases.bad_case.positives,
        m.cases.bad_case.negatives,
    );
}

pub fn eval(cfg: RunConfig, a: EvalArgs) -> anyhow::Result<()> {
    let layout = Layout::new(&cfg);
    let ckpt = a.checkpoint.unwrap_or_else(|| layout.root.join("checkpoints").join("model.ckpt"));
    let checkpoint = load_checkpoint(&ckpt, None).with_context(|| format!("cannot load {}", ckpt.display()))?;
    let schema = checkpoint.model.schema().clone();
    let data = a.data.unwrap_or_else(|| layout.data("test.samples"));
    let samples = load_samples(&data, &schema)?;
    let report = evaluate(&checkpoint.model, &samples)?;
    let path = layout.dir("metrics")?.join("metrics.json");
    #[derive(Serialize)]
    struct Record<'a> {
        variant: Variant,
        checkpoint: &'a Path,
        data: &'a Path,
        /// Negatives of each case group: clicked non-converting samples of the
        /// same (user, session) pairs.
        negative_pool: &'static str,
        #[serde(flatten)]
        metrics: MetricsReport,
    }
    write_json(
        &path,
        &Record {
            variant: checkpoint.model.variant(),
            checkpoint: &ckpt,
            data: &data,
            negative_pool: "clicked non-converting samples from the same user sessions",
            metrics: report,
        },
    )?;
    print_metrics(checkpoint.model.variant().name(), &report);
    println!("metrics {}", path.display());
    Ok(())
}

pub fn sweep(mut cfg: RunConfig, a: SweepArgs) -> anyhow::Result<()> {
    apply_train_flags(&mut cfg, &a.flags)?;
    if let Some(p) = a.parameter {
        cfg.evaluation.sweep_parameter = p;
    }
    if let Some(v) = a.values {
        cfg.evaluation.sweep_values = v;
    }
    if let Some(s) = a.seeds {
        cfg.evaluation.seeds = s;
    }
    if let Some(w) = a.workers {
        cfg.evaluation.workers = w;
    }
    let parameter: SweepParameter = cfg.evaluation.sweep_parameter.parse()?;
    if cfg.evaluation.sweep_values.is_empty() || cfg.evaluation.seeds.is_empty() {
        bail!(UsageError(anyhow::anyhow!("sweep needs at least one value and one seed")));
    }
    let layout = Layout::new(&cfg);
    let schema = cfg.schema()?;
    let train_samples = load_samples(&a.train.unwrap_or_else(|| layout.data("train.samples")), &schema)?;
    let test_samples = load_samples(&a.test.unwrap_or_else(|| layout.data("test.samples")), &schema)?;
    cfg.echo(&layout.root)?;
    let grid = SweepGrid::new(parameter, cfg.evaluation.sweep_values.clone());
    let rows = run_sweep(
        &cfg.train_config(),
        &grid,
        &cfg.evaluation.seeds,
        &schema,
        &train_samples,
        &test_samples,
        cfg.evaluation.workers,
    )?;
    let dir = layout.dir("sweeps")?;
    let stem = format!("sweep_{}_{}", cfg.model.variant.name(), parameter.name());
    let mut tsv = SweepRow::COLUMNS.join("\t");
    tsv.push('\n');
    for r in &rows {
        tsv.push_str(&r.to_tsv());
        tsv.push('\n');
    }
    fs::write(dir.join(format!("{stem}.tsv")), &tsv)?;
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    fs::write(dir.join(format!("{stem}.jsonl")), jsonl)?;
    print!("{tsv}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} sweep runs failed; see {}", rows.len(), dir.join(format!("{stem}.tsv")).display());
    }
    Ok(())
}

pub fn verify_gap(mut cfg: RunConfig, a: GapArgs) -> anyhow::Result<()> {
    if let Some(r) = a.rho {
        cfg.simulator.deferred_purchase_rate = r;
    }
    if let Some(s) = a.seed {
        cfg.simulator.seed = s;
    }
    cfg.simulator.validate()?;
    let layout = Layout::new(&cfg);
    cfg.echo(&layout.root)?;
    let report = gap_oracle(&cfg.simulator, a.n, cfg.simulator.seed)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_json(&layout.dir("metrics")?.join("gap.json"), &report)?;
    println!("rho                 {}", cfg.simulator.deferred_purchase_rate);
    println!("exposures           {}", report.n_samples);
    println!("ground truth E[R]   {:.6e}", report.ground_truth_e_r);
    println!("chain rule E[R]     {:.6e}", report.chain_rule_e_r);
    println!("gap                 {:.6e}", report.gap);
    println!("stderr              {:.6e}", report.monte_carlo_stderr);
    println!("upper bound         {:.6e}", report.upper_bound);
    println!(
        "gap within 3 stderr {}; bound respected {}",
        report.within_noise(3.0),
        report.respects_upper_bound(3.0)
    );
    Ok(())
}

pub fn ablate(mut cfg: RunConfig, a: AblateArgs) -> anyhow::Result<()> {
    apply_train_flags(&mut cfg, &a.flags)?;
    if let Some(b) = a.boundary {
        cfg.evaluation.boundary = b;
    }
    if let Some(s) = a.seeds {
        cfg.evaluation.seeds = s;
    }
    let layout = Layout::new(&cfg);
    let schema = cfg.schema()?;
    let input = a.input.unwrap_or_else(|| layout.data("raw.samples"));
    let raw = load_samples(&input, &schema)?;
    cfg.echo(&layout.root)?;
    #[derive(Serialize)]
    struct SeedReport {
        seed: u64,
        #[serde(flatten)]
        report: AblationReport,
    }
    let mut out = Vec::new();
    for &seed in &cfg.evaluation.seeds {
        let tc = cfg.train_config().with_seed(seed);
        let report = ablate_calibration(&tc, &schema, &raw, cfg.evaluation.boundary)?;
        for (tag, m) in report.rows() {
            print_metrics(&format!("{tag} seed {seed}"), m);
        }
        out.push(SeedReport { seed, report });
    }
    let path = layout.dir("metrics")?.join("ablation.json");
    write_json(&path, &out)?;
    println!("ablation {}", path.display());
    Ok(())
}
