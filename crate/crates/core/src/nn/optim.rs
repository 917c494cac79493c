//! Adagrad with an exponentially decayed accumulator, and a linear warm-up
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear warm-up: `base_lr * min(1, (t + 1) / max(1, warmup_steps))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and nonnegative, got {base_lr}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let ramp = (step + 1) as f64 / self.warmup_steps.max(1) as f64;
        self.base_lr * ramp.min(1.0)
    }
}

pub const DEFAULT_DECAY: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Per-parameter accumulator for one parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdagradState {
    accumulator: Vec<f64>,
    step_count: u64,
    decay: f64,
    epsilon: f64,
}

impl AdagradState {
    pub fn new(len: usize, decay: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("Adagrad decay must lie in [0, 1], got {decay}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("Adagrad epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            accumulator: vec![0.0; len],
            step_count: 0,
            decay,
            epsilon,
        })
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.accumulator
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Updates `params[i]` for `i` in `range`, reading `grads` from index 0.
    /// Used for row-sparse embedding updates; does not advance the step count.
    pub(crate) fn update_range(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        offset: usize,
        lr: f64,
    ) {
        let acc = &mut self.accumulator[offset..offset + grads.len()];
        for ((p, &g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
            if self.decay > 0.0 {
                *a = (1.0 - self.decay) * *a + g * g;
            } else {
                *a += g * g;
            }
            *p -= lr * g / (a.sqrt() + self.epsilon);
        }
    }

    pub(crate) fn advance(&mut self) {
        self.step_count += 1;
    }
}

/// One Adagrad step on a dense buffer.
///
/// Non-finite gradients abort before anything is written.
pub fn adagrad_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdagradState,
    schedule: &LrSchedule,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.accumulator.len() {
        return Err(Error::Shape(format!(
            "params ({}), grads ({}) and accumulator ({}) disagree",
            params.len(),
            grads.len(),
            state.accumulator.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            group: "<dense>".into(),
        });
    }
    let lr = schedule.lr_at(state.step_count);
    state.update_range(params, grads, 0, lr);
    state.advance();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_normalises_by_gradient_magnitude() {
        let mut p = [1.0];
        let mut st = AdagradState::new(1, 0.0, 1e-8).unwrap();
        let sched = LrSchedule::new(0.1, 0).unwrap();
        adagrad_step(&mut p, &[4.0], &mut st, &sched).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert_eq!(st.accumulator()[0], 16.0);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = [0.5, -2.0];
        let mut st = AdagradState::new(2, 0.0, 1e-8).unwrap();
        let sched = LrSchedule::new(0.1, 0).unwrap();
        adagrad_step(&mut p, &[1.0, 1.0], &mut st, &sched).unwrap();
        let (before_p, before_acc) = (p, st.accumulator().to_vec());
        adagrad_step(&mut p, &[0.0, 0.0], &mut st, &sched).unwrap();
        assert_eq!(p, before_p);
        assert_eq!(st.accumulator(), before_acc.as_slice());
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        // f(x) = 0.5 * 3 * (x - 2)^2, gradient 3 (x - 2)
        let sched = LrSchedule::new(0.3, 4).unwrap();
        for decay in [0.0, 1e-4, 0.2] {
            let mut p = [5.0];
            let mut st = AdagradState::new(1, decay, 1e-8).unwrap();
            let (mut x, mut acc) = (5.0f64, 0.0f64);
            for t in 0..10u64 {
                let g = 3.0 * (p[0] - 2.0);
                adagrad_step(&mut p, &[g], &mut st, &sched).unwrap();

                let gr = 3.0 * (x - 2.0);
                acc = if decay > 0.0 { (1.0 - decay) * acc + gr * gr } else { acc + gr * gr };
                let lr = 0.3 * f64::min(1.0, (t + 1) as f64 / 4.0);
                x -= lr * gr / (acc.sqrt() + 1e-8);
                assert!((p[0] - x).abs() < 1e-10, "decay {decay} step {t}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = [1.0, 2.0];
        let mut st = AdagradState::new(2, 0.0, 1e-8).unwrap();
        let sched = LrSchedule::new(0.1, 0).unwrap();
        let err = adagrad_step(&mut p, &[1.0, f64::NAN], &mut st, &sched).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn warmup_ramps_then_holds() {
        let s = LrSchedule::new(0.005, 1000).unwrap();
        assert!((s.lr_at(0) - 0.005 / 1000.0).abs() < 1e-18);
        assert_eq!(s.lr_at(999), 0.005);
        assert_eq!(s.lr_at(5000), 0.005);
        let s0 = LrSchedule::new(0.1, 0).unwrap();
        assert_eq!(s0.lr_at(0), 0.1);
    }

    proptest::proptest! {
        #[test]
        fn accumulator_stays_nonnegative(
            grads in proptest::collection::vec(-1e3f64..1e3, 1..60),
            decay in 0.0f64..=1.0,
        ) {
            let mut st = AdagradState::new(1, decay, 1e-8).unwrap();
            let sched = LrSchedule::new(0.01, 5).unwrap();
            let mut p = [0.0];
            let mut prev = 0.0;
            for g in grads {
                adagrad_step(&mut p, &[g], &mut st, &sched).unwrap();
                let a = st.accumulator()[0];
                proptest::prop_assert!(a >= 0.0);
                if decay == 0.0 {
                    proptest::prop_assert!(a >= prev);
                }
                prev = a;
            }
        }

        #[test]
        fn lr_nondecreasing_in_warmup_then_constant(base in 1e-4f64..1.0, warm in 0u64..200) {
            let s = LrSchedule::new(base, warm).unwrap();
            let mut prev = 0.0;
            for t in 0..(warm + 50) {
                let lr = s.lr_at(t);
                proptest::prop_assert!(lr >= prev);
                if t >= warm {
                    proptest::prop_assert_eq!(lr, base);
                }
                prev = lr;
            }
        }
    }
}
