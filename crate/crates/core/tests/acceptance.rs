//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::time::Instant;

use common::{brute_force_auc, desk_simulator, objective_grad_check, tied_instance, SESSION_BOUNDARY};
use esmc_core::data::{read_samples, split_and_calibrate, split_by_session, validate_hierarchy, write_samples, HierarchyMode};
use esmc_core::eval::{auc, auc_with, evaluate, sweep, SweepGrid, TieMode};
use esmc_core::model::{load_checkpoint, save_checkpoint};
use esmc_core::nn::Parameters;
use esmc_core::objective::KlMode;
use esmc_core::simulator::{gap_oracle, simulate, EventKind, SimulatorConfig};
use esmc_core::train::{train, TrainConfig};
use esmc_core::Variant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Users of the directional datasets: 500 users x 500 exposures = 2.5e5 samples.
const DESK_USERS: usize = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    for variant in Variant::ALL {
        for seed in 0..20 {
            let report = objective_grad_check(variant, seed, KlMode::TeacherStudent);
            let e = report.max_rel_error();
            if e > worst.0 {
                worst = (e, format!("{variant} seed {seed}"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 120.0,
        format!("8 variants x 20 instances, max rel err {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=200);
        let (scores, labels) = tied_instance(&mut rng, n);
        let a = auc(&scores, &labels).unwrap();
        let s = auc_with(&scores, &labels, TieMode::Strict).unwrap();
        worst = worst
            .max((a - brute_force_auc(&scores, &labels, 0.5)).abs())
            .max((s - brute_force_auc(&scores, &labels, 0.0)).abs());
    }
    outcome(worst <= 1e-12, format!("200 tied instances, both tie modes, max abs diff {worst:.1e}"))
}

fn gap_reproduction() -> Outcome {
    let t = Instant::now();
    let good = gap_oracle(&SimulatorConfig::reference(), 1_000_000, 17).unwrap();
    let bad = gap_oracle(&SimulatorConfig::reference().with_rho(0.5), 1_000_000, 17).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = good.within_noise(3.0)
        && !bad.within_noise(3.0)
        && good.respects_upper_bound(3.0)
        && bad.respects_upper_bound(3.0)
        && secs < 60.0;
    outcome(
        pass,
        format!(
            "rho=0 gap {:.2e} (3se {:.2e}); rho=0.5 gap {:.2e} (3se {:.2e}, bound {:.3e}); {secs:.1}s",
            good.gap,
            3.0 * good.monte_carlo_stderr,
            bad.gap,
            3.0 * bad.monte_carlo_stderr,
            bad.upper_bound
        ),
    )
}

fn simulator_calibration() -> Outcome {
    let log = simulate(&SimulatorConfig::reference(), 99).unwrap();
    let n = log.count(EventKind::Exposure) as f64;
    let clicks = log.count(EventKind::Click) as f64;
    let carts = log.count(EventKind::Cart) as f64;
    let buys = log.count(EventKind::Purchase) as f64;
    let z = |obs: f64, p: f64, trials: f64| (obs - p) / (p * (1.0 - p) / trials).sqrt();
    let zs = [z(clicks / n, 0.06096, n), z(buys / n, 0.01093, n), z(buys / carts, 0.8, carts)];
    outcome(
        zs.iter().all(|z| z.abs() <= 3.0),
        format!(
            "click {:.5} (z {:.2}), purchase {:.5} (z {:.2}), purchase|cart {:.4} (z {:.2})",
            clicks / n,
            zs[0],
            buys / n,
            zs[1],
            buys / carts,
            zs[2]
        ),
    )
}

/// Criteria 5 and 6 share their datasets and the calibrated ESMC runs.
fn directional() -> (Outcome, Outcome) {
    let t = Instant::now();
    let (mut bad_c, mut bad_m, mut cvr_c, mut cvr_m, mut ctcvr_c, mut ctcvr_raw) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let sim = desk_simulator(DESK_USERS, 0.5, seed);
        let raw = sim.dataset();
        let (cal, _) = split_and_calibrate(&raw, SESSION_BOUNDARY).unwrap();
        let raw_train = split_by_session(&raw, SESSION_BOUNDARY).unwrap().train;
        let run = |variant, data| {
            let c = TrainConfig::desk(variant).with_seed(seed);
            let model = train(&c, &sim.schema(), data).unwrap().model;
            evaluate(&model, &cal.test).unwrap()
        };
        let esmc = run(Variant::Esmc, &cal.train);
        let esmm2 = run(Variant::Esmm2, &raw_train);
        let esmc_minus = run(Variant::Esmc, &raw_train);
        bad_c.push(esmc.cases.bad_case.cvr_auc.unwrap());
        bad_m.push(esmm2.cases.bad_case.cvr_auc.unwrap());
        cvr_c.push(esmc.cvr_auc.unwrap());
        cvr_m.push(esmm2.cvr_auc.unwrap());
        ctcvr_c.push(esmc.ctcvr_auc.unwrap());
        ctcvr_raw.push(esmc_minus.ctcvr_auc.unwrap());
    }
    let secs = t.elapsed().as_secs_f64();
    let c5 = outcome(
        mean(&bad_c) >= mean(&bad_m) + 0.005 && mean(&cvr_c) >= mean(&cvr_m) && secs < 1800.0,
        format!(
            "bad-case CVR-AUC ESMC {:.4} vs ESMM2 {:.4}; CVR-AUC {:.4} vs {:.4}; 5 seeds, {} samples each, {secs:.0}s",
            mean(&bad_c),
            mean(&bad_m),
            mean(&cvr_c),
            mean(&cvr_m),
            SimulatorConfig { n_users: DESK_USERS, ..SimulatorConfig::reference() }.n_exposures()
        ),
    );

    // bit-identity of the ablation pair without deferral
    let sim = desk_simulator(100, 0.0, 0);
    let raw = sim.dataset();
    let (cal, _) = split_and_calibrate(&raw, SESSION_BOUNDARY).unwrap();
    let raw_train = split_by_session(&raw, SESSION_BOUNDARY).unwrap().train;
    let c = TrainConfig::desk(Variant::Esmc);
    let with = train(&c, &sim.schema(), &cal.train).unwrap().model;
    let without = train(&c, &sim.schema(), &raw_train).unwrap().model;
    let identical = with.param_groups() == without.param_groups();
    let c6 = outcome(
        mean(&ctcvr_c) >= mean(&ctcvr_raw) && identical,
        format!(
            "CTCVR-AUC ESMC {:.4} vs ESMC- {:.4} at rho=0.5; rho=0 runs bit-identical: {identical}",
            mean(&ctcvr_c),
            mean(&ctcvr_raw)
        ),
    );
    (c5, c6)
}

fn structural() -> Outcome {
    let sim = desk_simulator(40, 0.5, 5);
    let (cal, _) = split_and_calibrate(&sim.dataset(), SESSION_BOUNDARY).unwrap();
    let mut composition_ok = true;
    let mut siamese_ok = true;
    for variant in Variant::ALL {
        let mut c = TrainConfig::desk(variant);
        c.epochs = 1;
        let model = train(&c, &sim.schema(), &cal.train).unwrap().model;
        for chunk in cal.test.chunks(1024) {
            let bundles = model.predict(chunk.iter().map(|s| s.feature_ids.as_slice())).unwrap();
            composition_ok &= bundles.iter().all(|b| b.composition_holds());
            if matches!(variant, Variant::Esms | Variant::Esms2) {
                siamese_ok &= bundles.iter().all(|b| b.p_car.map(f64::to_bits) == Some(b.p_cvr.to_bits()));
            }
        }
    }
    let mut zero = TrainConfig::desk(Variant::Esmc);
    zero.epochs = 1;
    zero.weights.kl = 0.0;
    let mut off = zero.clone();
    off.kl_mode = KlMode::Off;
    let a = train(&zero, &sim.schema(), &cal.train).unwrap();
    let b = train(&off, &sim.schema(), &cal.train).unwrap();
    let unconstrained = a.model.param_groups() == b.model.param_groups();
    let violations = validate_hierarchy(&cal.train, HierarchyMode::Calibrated).len()
        + validate_hierarchy(&cal.test, HierarchyMode::Calibrated).len();
    outcome(
        composition_ok && siamese_ok && unconstrained && violations == 0,
        format!(
            "composition exact: {composition_ok}; ESMS pCVR == pCAR: {siamese_ok}; \
             kl weight 0 == unconstrained: {unconstrained}; hierarchy violations: {violations}"
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let sim = desk_simulator(30, 0.5, 12);
        let raw = sim.dataset();
        let data = dir.path().join(format!("{tag}.samples"));
        write_samples(&data, &sim.schema().hash(), &raw).unwrap();
        let (cal, _) = split_and_calibrate(&raw, SESSION_BOUNDARY).unwrap();
        let mut c = TrainConfig::desk(Variant::Esmc2).with_seed(3);
        c.epochs = 1;
        let model = train(&c, &sim.schema(), &cal.train).unwrap().model;
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        save_checkpoint(&ckpt, &model, &c.weights).unwrap();
        let metrics = serde_json::to_vec(&evaluate(&model, &cal.test).unwrap()).unwrap();
        (raw, model, c.weights, data, ckpt, metrics, sim.schema())
    };
    let (raw, model, weights, d1, k1, m1, schema) = run("a");
    let (_, _, _, d2, k2, m2, _) = run("b");
    let bytes = |p: &std::path::Path| std::fs::read(p).unwrap();
    let repeat = bytes(&d1) == bytes(&d2) && bytes(&k1) == bytes(&k2) && m1 == m2;
    let dataset_rt = read_samples(&d1).unwrap().1 == raw;
    let ck = load_checkpoint(&k1, Some(&schema)).unwrap();
    let ckpt_rt = ck.model == model && ck.weights == weights;
    outcome(
        repeat && dataset_rt && ckpt_rt,
        format!("byte-identical reruns: {repeat}; dataset round-trip: {dataset_rt}; checkpoint round-trip: {ckpt_rt}"),
    )
}

fn sweep_protocol() -> Outcome {
    let t = Instant::now();
    let sim = desk_simulator(100, 0.5, 21);
    let (cal, _) = split_and_calibrate(&sim.dataset(), SESSION_BOUNDARY).unwrap();
    let base = TrainConfig::desk(Variant::Esmc2);
    let schema = sim.schema();
    let kl = sweep(&base, &SweepGrid::kl(), &SEEDS, &schema, &cal.train, &cal.test, workers()).unwrap();
    let global = sweep(&base, &SweepGrid::ctcar_global(), &SEEDS, &schema, &cal.train, &cal.test, workers()).unwrap();
    let complete = |rows: &[esmc_core::eval::SweepRow]| {
        rows.len() == 25 && rows.iter().all(|r| r.error.is_none() && r.cvr_auc.is_some())
    };
    let ends = SweepGrid::new(esmc_core::eval::SweepParameter::Kl, vec![0.0, 1.0]);
    let esmc = TrainConfig::desk(Variant::Esmc);
    let rows = sweep(&esmc, &ends, &SEEDS, &schema, &cal.train, &cal.test, workers()).unwrap();
    let dist = |v: f64| mean(&rows.iter().filter(|r| r.value == v).map(|r| r.twin_distance.unwrap()).collect::<Vec<_>>());
    let (d0, d1) = (dist(0.0), dist(1.0));
    outcome(
        complete(&kl) && complete(&global) && d1 < d0,
        format!(
            "KL grid {} rows, global-weight grid {} rows, complete: {}; twin distance kl=0 {d0:.3} vs kl=1 {d1:.3}; {:.0}s",
            kl.len(),
            global.len(),
            complete(&kl) && complete(&global),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient integrity", gradient_integrity());
    report(2, "AUC oracle equivalence", auc_oracle());
    report(3, "gap oracle", gap_reproduction());
    report(4, "simulator calibration", simulator_calibration());
    let (c5, c6) = directional();
    report(5, "bad-case direction", c5);
    report(6, "calibration ablation", c6);
    report(7, "structural identities", structural());
    report(8, "determinism and round-trips", determinism());
    report(9, "sweep protocol", sweep_protocol());
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
