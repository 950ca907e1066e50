//! Central finite-difference verification of tape gradients.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Upper bound on probed coordinates per input; larger inputs are
    /// subsampled deterministically.
    pub max_coords: usize,
    /// Seed for subsampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input, over
    /// the probed coordinates.
    pub rel_errors: Vec<f64>,
    /// Norm of the numeric gradient over probed coordinates, per input.
    pub numeric_norms: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

fn probe_indices(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let mut picked = Vec::with_capacity(max);
    while picked.len() < max {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let i = ((state >> 33) as usize) % n;
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences for every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars);
        tape.item(out)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut numeric_norms = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[which])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let idx = probe_indices(input.numel(), opts.max_coords, opts.seed ^ which as u64);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut work: Vec<Tensor> = inputs.to_vec();
        for &i in &idx {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + opts.step;
            let plus = eval(&work);
            work[which].data_mut()[i] = orig - opts.step;
            let minus = eval(&work);
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        rel_errors.push(if scale < 1e-12 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / scale
        });
        numeric_norms.push(n2.sqrt());
    }
    GradCheckReport {
        rel_errors,
        numeric_norms,
    }
}

/// Reduce a tensor-valued output to a scalar with fixed pseudo-random
/// weights, so every output element contributes to the checked gradient.
pub fn random_projection(tape: &Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out);
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let weights = Tensor::from_fn(&shape, |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    });
    let w = tape.constant(weights);
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_are_unique_and_bounded() {
        let idx = probe_indices(1000, 20, 3);
        assert_eq!(idx.len(), 20);
        let mut d = idx.clone();
        d.dedup();
        assert_eq!(d.len(), 20);
        assert!(idx.iter().all(|&i| i < 1000));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(&[3], vec![0.3, -0.2, 0.9]);
        // value is x², backward claims 3x: must be flagged
        let report = check_gradients(
            |t, v| {
                let sq = t.value(v[0]).map(|a| a * a);
                let y = t.custom(
                    &[v[0]],
                    sq,
                    Box::new(|ctx| vec![Some(ctx.inputs[0].zip_map(ctx.grad, |a, g| 3.0 * a * g))]),
                );
                t.sum(y)
            },
            &[x],
            GradCheckOptions::default(),
        );
        assert!(report.max_rel_error() > 0.1);
    }
}
