#![allow(dead_code)]

use esmc_core::data::{Domain, InteractionSample};
use esmc_core::embedding::{FeatureSchema, FieldSpec, OovPolicy};
use esmc_core::model::{Model, ModelConfig, Variant};
use esmc_core::nn::{grad_check_multistep, GradCheckReport, Parameters};
use esmc_core::objective::{KlMode, LossWeights, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_schema() -> FeatureSchema {
    FeatureSchema::new(
        vec![
            FieldSpec::new("user", 6, 3),
            FieldSpec::new("item", 5, 2),
            FieldSpec::new("bucket", 4, 2),
        ],
        OovPolicy::ReservedBucket,
    )
    .unwrap()
}

pub fn tiny_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        tower_hidden: vec![5, 3],
        bottom_hidden: vec![5],
        head_hidden: vec![3],
        experts: 2,
        seed,
        ..ModelConfig::default()
    }
}

/// Random calibrated batch respecting `o <= a <= c`, with both domains.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<InteractionSample> {
    (0..n)
        .map(|i| {
            let level = rng.random_range(0..4u8);
            InteractionSample {
                user_id: rng.random_range(0..6),
                item_id: rng.random_range(0..5),
                session_id: i as u32,
                feature_ids: vec![rng.random_range(0..6), rng.random_range(0..5), rng.random_range(0..4)],
                domain: if level >= 2 && rng.random_bool(0.4) {
                    Domain::Search
                } else {
                    Domain::Rec
                },
                click: level >= 1,
                cart: level >= 2,
                purchase: level >= 3,
                calibrated: true,
                cart_origin_session: None,
            }
        })
        .collect()
}

/// Weights with every term active (kl zeroed where it must be).
pub fn full_weights(variant: Variant, rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        ctr: rng.random_range(0.5..1.5),
        ctcvr: rng.random_range(0.5..1.5),
        ctcar: rng.random_range(0.5..1.5),
        ctcar_global: rng.random_range(0.1..1.0),
        kl: if variant == Variant::Esms2 {
            0.0
        } else {
            rng.random_range(0.5..5.0)
        },
    }
}

/// Central-difference steps for whole-objective checks, finest first. Some
/// parameters have gradients near 1e-8; at h = 1e-5 the rounding noise of an
/// O(1) loss (about 1e-16 / h) is already 1e-3 of such a gradient, so coarser
/// steps are used wherever they agree with the finer ones. The fine end of the
/// ladder handles LeakyReLU kinks that sit within 1e-5 of a probe.
pub const FD_STEPS: [f64; 5] = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3];

/// Analytic gradient of the full objective against central differences.
/// Under the teacher/student KL the numeric side pins the teacher tower.
pub fn objective_grad_check(variant: Variant, seed: u64, kl_mode: KlMode) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(tiny_config(variant, seed), tiny_schema()).unwrap();
    let batch = random_batch(&mut rng, 6);
    let weights = full_weights(variant, &mut rng);
    let obj = Objective::new(variant, weights, kl_mode).unwrap();
    let mut grads = model.zero_grads();
    obj.value_and_grad(&model, &batch, &mut grads).unwrap();
    let analytic = grads.to_dense(model.schema());
    assert_eq!(analytic.len(), model.param_groups().len());
    let teacher = model.twin_towers().map(|(car, _)| car.flatten());
    match (teacher, kl_mode) {
        (Some(t), KlMode::TeacherStudent) => grad_check_multistep(&mut model, &analytic, &FD_STEPS, |m| {
            obj.value_with_teacher(m, &batch, &t).unwrap().total
        }),
        _ => grad_check_multistep(&mut model, &analytic, &FD_STEPS, |m| obj.value(m, &batch).unwrap().total),
    }
}

/// Pairwise AUC straight from the definition, `O(|P| · |N|)`.
pub fn brute_force_auc(scores: &[f64], labels: &[bool], tie_credit: f64) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            pairs += 1.0;
            if sp > sn {
                total += 1.0;
            } else if sp == sn {
                total += tie_credit;
            }
        }
    }
    total / pairs
}

/// Scores drawn from a small set of levels so that ties are common.
pub fn tied_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let levels = rng.random_range(1..=n.max(2));
    loop {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// Simulated reference dataset with `users` users and deferral rate `rho`.
pub fn desk_simulator(users: usize, rho: f64, seed: u64) -> esmc_core::simulator::Simulator {
    let cfg = esmc_core::simulator::SimulatorConfig {
        n_users: users,
        seed,
        ..esmc_core::simulator::SimulatorConfig::reference().with_rho(rho)
    };
    esmc_core::simulator::Simulator::new(cfg).unwrap()
}

/// Sessions before this index train, the rest test.
pub const SESSION_BOUNDARY: u32 = 8;
