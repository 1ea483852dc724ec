//! Gradient snapshots of earlier merged models and the stage-2 penalty
//! terms built on them.
//!
//! Every penalty is a function of the adapter's effective delta `ΔW = s·B·A`
//! and is summed per layer in layer order. The factor gradients follow from
//! the delta gradient through [`factor_grads`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, Matrix};
use crate::lora::{adapter_norm_sq, merge, BaseWeights, DeltaStack, LoraAdapter};
use crate::models::{factor_grads, Batch, FactorGrad, Model};

/// Defaults for the orthogonality and norm weights.
pub const DEFAULT_LAMBDA_ORTH: f64 = 2e-2;
pub const DEFAULT_LAMBDA_NORM: f64 = 1e-2;

/// Gradient of the loss on some data, taken at a frozen merged model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpwcSnapshot {
    /// Task (1-based) whose stage 2 this snapshot constrains.
    pub task: usize,
    /// Number of frozen deltas in the merged model the gradient was taken
    /// at; 0 is the base model.
    pub source: usize,
    pub grads: Vec<Matrix>,
    pub samples: usize,
}

impl GpwcSnapshot {
    pub fn layer_norms(&self) -> Vec<f64> {
        self.grads.iter().map(Matrix::frobenius_norm).collect()
    }

    pub fn norm(&self) -> f64 {
        self.layer_norms().iter().map(|n| n * n).sum::<f64>().sqrt()
    }

    /// Each layer divided by its Frobenius norm (layers with norm below
    /// 1e-12 are left untouched).
    pub fn normalized(&self) -> GpwcSnapshot {
        let grads = self
            .grads
            .iter()
            .map(|g| {
                let n = g.frobenius_norm();
                if n > 1e-12 {
                    g.scale(1.0 / n)
                } else {
                    g.clone()
                }
            })
            .collect();
        GpwcSnapshot {
            grads,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA_ORTH,
            lambda2: DEFAULT_LAMBDA_NORM,
        }
    }
}

impl RegWeights {
    pub const ZERO: RegWeights = RegWeights {
        lambda1: 0.0,
        lambda2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "regularization weights must be >= 0, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// How each inner-product term is penalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrthPenalty {
    #[default]
    Abs,
    Square,
}

impl OrthPenalty {
    /// Penalty value and its derivative with respect to the inner product.
    fn apply(self, t: f64) -> (f64, f64) {
        match self {
            OrthPenalty::Abs => (
                t.abs(),
                if t > 0.0 {
                    1.0
                } else if t < 0.0 {
                    -1.0
                } else {
                    0.0
                },
            ),
            OrthPenalty::Square => (t * t, 2.0 * t),
        }
    }
}

/// A penalty value with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RegTerm {
    pub value: f64,
    /// Gradient with respect to each layer's effective delta.
    pub delta_grads: Vec<Matrix>,
    pub factor_grads: Vec<FactorGrad>,
    /// Number of constraint sets (snapshots or stack entries) evaluated.
    pub sets: usize,
}

/// Gradient of the loss on `d2` at `W0 + Σ_{m ≤ j} ΔW_m`, where `prefix`
/// holds the first `j` frozen deltas.
pub fn compute_gpwc(
    model: &Model,
    base: &BaseWeights,
    prefix: &DeltaStack,
    d2: &Batch,
    task: usize,
) -> Result<GpwcSnapshot> {
    if d2.is_empty() {
        return Err(Error::Input("GPWC needs a non-empty stage-2 subset".into()));
    }
    let merged = merge(base, prefix, None)?;
    let report = model.grad_wrt_merged(&merged, d2)?;
    Ok(GpwcSnapshot {
        task,
        source: prefix.len(),
        grads: report.grads,
        samples: d2.len(),
    })
}

fn check_layers(mats: &[Matrix], delta: &[Matrix]) -> Result<()> {
    if mats.len() != delta.len() {
        return Err(Error::Config(format!(
            "{} constraint layers for {} adapter layers",
            mats.len(),
            delta.len()
        )));
    }
    for (m, d) in mats.iter().zip(delta) {
        if m.shape() != d.shape() {
            return Err(Error::dim("orthogonality", m.shape(), d.shape()));
        }
    }
    Ok(())
}

/// `Σ_sets Σ_layers penalty(⟨C_layer, ΔW_layer⟩)` over arbitrary constraint
/// matrices.
fn inner_product_penalty<'a, I>(
    sets: I,
    adapter: &LoraAdapter,
    penalty: OrthPenalty,
) -> Result<RegTerm>
where
    I: IntoIterator<Item = &'a [Matrix]>,
{
    let delta = adapter.effective_delta();
    let mut delta_grads: Vec<Matrix> = delta
        .iter()
        .map(|d| Matrix::zeros(d.rows(), d.cols()))
        .collect();
    let mut value = 0.0;
    let mut count = 0;
    for set in sets {
        check_layers(set, &delta)?;
        for ((c, d), g) in set.iter().zip(&delta).zip(delta_grads.iter_mut()) {
            let t = frobenius_inner(c, d)?;
            let (p, dp) = penalty.apply(t);
            value += p;
            if dp != 0.0 {
                g.add_scaled_assign(dp, c)?;
            }
        }
        count += 1;
    }
    let factor_grads = factor_grads(adapter, &delta_grads)?;
    Ok(RegTerm {
        value,
        delta_grads,
        factor_grads,
        sets: count,
    })
}

/// Orthogonality penalty against every snapshot `j = 1..i-1`.
pub fn orth_loss_full(
    snapshots: &[GpwcSnapshot],
    adapter: &LoraAdapter,
    penalty: OrthPenalty,
) -> Result<RegTerm> {
    inner_product_penalty(
        snapshots.iter().map(|s| s.grads.as_slice()),
        adapter,
        penalty,
    )
}

/// Orthogonality penalty against the most recent snapshot only.
pub fn orth_loss_proxy(
    snapshot: &GpwcSnapshot,
    adapter: &LoraAdapter,
    penalty: OrthPenalty,
) -> Result<RegTerm> {
    inner_product_penalty(std::iter::once(snapshot.grads.as_slice()), adapter, penalty)
}

/// Orthogonality to earlier tasks' frozen deltas rather than gradients.
pub fn param_orth_loss(
    stack: &DeltaStack,
    adapter: &LoraAdapter,
    penalty: OrthPenalty,
) -> Result<RegTerm> {
    inner_product_penalty(stack.entries().iter().map(Vec::as_slice), adapter, penalty)
}

/// `‖ΔW‖_F²` summed over layers.
pub fn norm_loss(adapter: &LoraAdapter) -> Result<RegTerm> {
    let delta = adapter.effective_delta();
    let delta_grads: Vec<Matrix> = delta.iter().map(|d| d.scale(2.0)).collect();
    let factor_grads = factor_grads(adapter, &delta_grads)?;
    Ok(RegTerm {
        value: adapter_norm_sq(adapter),
        delta_grads,
        factor_grads,
        sets: 0,
    })
}

/// Snapshots for the history-based arm: the gradient of each earlier merged
/// model on that task's own retained data.
pub fn history_snapshots(
    model: &Model,
    base: &BaseWeights,
    stack: &DeltaStack,
    retained: &[Batch],
    task: usize,
) -> Result<Vec<GpwcSnapshot>> {
    let previous = task.saturating_sub(1);
    if retained.len() < previous || stack.len() < previous {
        return Err(Error::Config(format!(
            "history arm needs data and deltas for {previous} earlier tasks, has {} datasets and {} deltas",
            retained.len(),
            stack.len()
        )));
    }
    (1..=previous)
        .map(|j| {
            let data = &retained[j - 1];
            if data.is_empty() {
                return Err(Error::Config(format!(
                    "retained data for task {j} is empty"
                )));
            }
            let merged = merge(base, &stack.prefix(j), None)?;
            let report = model.grad_wrt_merged(&merged, data)?;
            Ok(GpwcSnapshot {
                task,
                source: j,
                grads: report.grads,
                samples: data.len(),
            })
        })
        .collect()
}

/// Same functional form as [`orth_loss_full`], with each snapshot taken on
/// the earlier task's own data.
pub fn history_grad_orth_loss(
    model: &Model,
    base: &BaseWeights,
    stack: &DeltaStack,
    retained: &[Batch],
    adapter: &LoraAdapter,
    penalty: OrthPenalty,
) -> Result<RegTerm> {
    let task = stack.len() + 1;
    let snaps = history_snapshots(model, base, stack, retained, task)?;
    orth_loss_full(&snaps, adapter, penalty)
}
