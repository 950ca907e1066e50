//! Inner-loop optimisers.

use std::collections::BTreeMap;

use migs_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MigsError, Result};
use crate::state::{round_f32, ModelState, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Plain gradient descent.
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimiser with per-parameter moment state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment state as named tensors under `prefix`.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}step"), Tensor::scalar(self.step as f64))];
        for (name, t) in &self.first {
            out.push((format!("{prefix}m/{name}"), t.clone()));
        }
        for (name, t) in &self.second {
            out.push((format!("{prefix}v/{name}"), t.clone()));
        }
        out
    }

    /// Inverse of [`Optimizer::export`]; entries outside `prefix` are ignored.
    pub fn import<'a>(
        &mut self,
        prefix: &str,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen_step = false;
        for (name, t) in entries {
            let Some(rest) = name.strip_prefix(prefix) else {
                continue;
            };
            if rest == "step" {
                self.step = t.item() as u64;
                seen_step = true;
            } else if let Some(n) = rest.strip_prefix("m/") {
                self.first.insert(n.to_string(), t.clone());
            } else if let Some(n) = rest.strip_prefix("v/") {
                self.second.insert(n.to_string(), t.clone());
            } else {
                return Err(MigsError::Contract(format!(
                    "unexpected optimiser entry {name}"
                )));
            }
        }
        if !seen_step {
            return Err(MigsError::Contract(format!(
                "optimiser state {prefix} missing step counter"
            )));
        }
        Ok(())
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        for (name, entry) in state.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if entry.kind != ParamKind::Trainable {
                return Err(MigsError::Contract(format!("gradient for buffer {name}")));
            }
            if g.shape() != entry.value.shape() {
                return Err(MigsError::Contract(format!(
                    "gradient shape mismatch for {name}"
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, d) in entry.value.data_mut().iter_mut().zip(g.data()) {
                        *p -= self.lr * d;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .second
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (i, p) in entry.value.data_mut().iter_mut().enumerate() {
                        let gi = g.data()[i];
                        // Moments live at checkpoint precision so a resumed run continues exactly.
                        md[i] = (beta1 * md[i] + (1.0 - beta1) * gi) as f32 as f64;
                        vd[i] = (beta2 * vd[i] + (1.0 - beta2) * gi * gi) as f32 as f64;
                        *p -= self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
                    }
                }
            }
            round_f32(&mut entry.value);
        }
        Ok(())
    }
}
