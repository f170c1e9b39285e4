//! Central finite-difference verification of the hand-written backward
//! passes. Perturbs randomly chosen coordinates of every trainable tensor
//! and compares the loss slope against the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{train_step_sample, Model, TrainSample};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checks: usize,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
}

fn with_coord<R>(model: &mut Model, tensor_idx: usize, coord: usize, f: impl FnOnce(&mut f64) -> R) -> R {
    let mut result = None;
    let mut f = Some(f);
    let mut idx = 0;
    model.visit_params_mut(|_, t, trainable| {
        if !trainable {
            return;
        }
        if idx == tensor_idx {
            result = Some((f.take().unwrap())(&mut t.data[coord]));
        }
        idx += 1;
    });
    result.expect("tensor index in range")
}

/// Check `picks` random coordinates of every trainable tensor against
/// central differences. Dropout is disabled so the loss is deterministic.
pub fn check_gradients(
    model: &mut Model,
    sample: &TrainSample,
    picks: usize,
    seed: u64,
) -> GradCheckReport {
    let (_, analytic) = train_step_sample(model, sample, None).expect("forward pass");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checks: 0,
        worst: String::new(),
    };

    let names: Vec<String> = {
        let mut names = Vec::new();
        model.visit_params(|name, _, trainable| {
            if trainable {
                names.push(name.to_string());
            }
        });
        names
    };

    for (ti, grad) in analytic.tensors.iter().enumerate() {
        for _ in 0..picks {
            let coord = rng.gen_range(0..grad.len());
            let theta = with_coord(model, ti, coord, |v| *v);
            let eps = 1e-5 * theta.abs().max(1.0);

            with_coord(model, ti, coord, |v| *v = theta + eps);
            let (loss_plus, _) = train_step_sample(model, sample, None).expect("forward pass");
            with_coord(model, ti, coord, |v| *v = theta - eps);
            let (loss_minus, _) = train_step_sample(model, sample, None).expect("forward pass");
            with_coord(model, ti, coord, |v| *v = theta);

            let numeric = (loss_plus - loss_minus) / (2.0 * eps);
            let a = grad.data[coord];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-10 {
                report.checks += 1;
                continue;
            }
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{}]: analytic {a} vs numeric {numeric}", names[ti], coord);
            }
            report.checks += 1;
        }
    }
    report
}
