//! Minimal dense-network substrate: layers, Adagrad, warm-up, gradient checks.

mod gradcheck;
mod layer;
mod optim;

pub use gradcheck::{grad_check, grad_check_multistep, relative_error, GradCheckReport, GroupCheck};
pub use layer::{sigmoid, Activation, DenseLayer, Mlp, MlpCache, DEFAULT_LEAKY_SLOPE};
pub use optim::{adagrad_step, AdagradState, LrSchedule, DEFAULT_DECAY, DEFAULT_EPSILON};

/// Anything exposing its trainable values as named flat buffers.
///
/// The order of groups is stable and identical between the shared and
/// mutable views; optimizers and gradient checks rely on it.
pub trait Parameters {
    fn param_groups(&self) -> Vec<(String, &[f64])>;
    fn param_groups_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

impl Parameters for Mlp {
    fn param_groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.groups("mlp", &mut out);
        out
    }

    fn param_groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.groups_mut("mlp", &mut out);
        out
    }
}
