//! Continual-learning scores and a few second-order diagnostics.
//!
//! Task and checkpoint indices are 1-based in the public API: `get(t, j)` is
//! the score on task `j` after finishing task `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, solve, Matrix};
use crate::models::{Batch, Model};
use crate::tasks::TaskStream;

/// Score matrix with possibly absent entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfMatrix {
    n: usize,
    r: Vec<Vec<Option<f64>>>,
}

impl PerfMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            r: vec![vec![None; n]; n],
        }
    }

    /// Fully populated matrix from rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut pm = Self::new(n);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::Input(format!(
                    "row {} has {} entries, expected {n}",
                    t + 1,
                    row.len()
                )));
            }
            for (j, v) in row.into_iter().enumerate() {
                pm.set(t + 1, j + 1, v)?;
            }
        }
        Ok(pm)
    }

    /// Lower-triangular rows: row `t` holds scores for tasks `1..=t`.
    pub fn from_lower(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut pm = Self::new(n);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Input(format!(
                    "row {} has {} entries, expected {}",
                    t + 1,
                    row.len(),
                    t + 1
                )));
            }
            for (j, v) in row.into_iter().enumerate() {
                pm.set(t + 1, j + 1, v)?;
            }
        }
        Ok(pm)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, t: usize, j: usize, score: f64) -> Result<()> {
        self.check_index(t, j)?;
        if !(0.0..=100.0).contains(&score) {
            return Err(Error::Input(format!(
                "score {score} at ({t}, {j}) is outside [0, 100]"
            )));
        }
        self.r[t - 1][j - 1] = Some(score);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        if t == 0 || j == 0 || t > self.n || j > self.n {
            return None;
        }
        self.r[t - 1][j - 1]
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.r
    }

    pub fn is_full(&self) -> bool {
        self.r.iter().flatten().all(Option::is_some)
    }

    fn check_index(&self, t: usize, j: usize) -> Result<()> {
        if t == 0 || j == 0 || t > self.n || j > self.n {
            return Err(Error::Input(format!(
                "index ({t}, {j}) outside a {0}x{0} matrix",
                self.n
            )));
        }
        Ok(())
    }

    fn need(&self, t: usize, j: usize) -> Result<f64> {
        self.get(t, j).ok_or_else(|| {
            Error::Input(format!("score after task {t} on task {j} is not populated"))
        })
    }
}

fn need_tasks(pm: &PerfMatrix) -> Result<()> {
    if pm.n == 0 {
        return Err(Error::Input("empty performance matrix".into()));
    }
    Ok(())
}

/// Mean score over all tasks after the final task.
pub fn last(pm: &PerfMatrix) -> Result<f64> {
    need_tasks(pm)?;
    let n = pm.n;
    let mut sum = 0.0;
    for j in 1..=n {
        sum += pm.need(n, j)?;
    }
    Ok(sum / n as f64)
}

/// Mean over checkpoints of the mean score on tasks seen so far.
pub fn avg(pm: &PerfMatrix) -> Result<f64> {
    need_tasks(pm)?;
    let mut total = 0.0;
    for t in 1..=pm.n {
        let mut seen = 0.0;
        for j in 1..=t {
            seen += pm.need(t, j)?;
        }
        total += seen / t as f64;
    }
    Ok(total / pm.n as f64)
}

/// Mean over the whole matrix, unseen tasks included.
pub fn avg_all(pm: &PerfMatrix) -> Result<f64> {
    need_tasks(pm)?;
    let mut total = 0.0;
    for t in 1..=pm.n {
        for j in 1..=pm.n {
            total += pm.need(t, j)?;
        }
    }
    Ok(total / (pm.n * pm.n) as f64)
}

/// Score on each task right after learning it.
pub fn imd(pm: &PerfMatrix) -> Result<Vec<f64>> {
    (1..=pm.n).map(|j| pm.need(j, j)).collect()
}

/// Mean change on earlier tasks between learning them and the end.
pub fn bwt(pm: &PerfMatrix) -> Result<f64> {
    let n = pm.n;
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "backward transfer needs at least 2 tasks, got {n}"
        )));
    }
    let mut sum = 0.0;
    for j in 1..n {
        sum += pm.need(n, j)? - pm.need(j, j)?;
    }
    Ok(sum / (n - 1) as f64)
}

/// Headline metrics; entries the matrix cannot support are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub last: Option<f64>,
    pub avg: Option<f64>,
    pub avg_all: Option<f64>,
    pub bwt: Option<f64>,
    pub imd: Option<Vec<f64>>,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_matrix(pm: &PerfMatrix) -> Self {
        Self {
            last: last(pm).ok(),
            avg: avg(pm).ok(),
            avg_all: avg_all(pm).ok(),
            bwt: bwt(pm).ok(),
            imd: imd(pm).ok(),
            n: pm.n,
        }
    }

    pub fn mean_imd(&self) -> Option<f64> {
        self.imd
            .as_ref()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// `|L(w + δ) − L(w) − ⟨∇L(w), δ⟩|`, the remainder past first order.
pub fn lossless_residual(
    model: &Model,
    weights: &[Matrix],
    delta: &[Matrix],
    batch: &Batch,
) -> Result<f64> {
    if weights.len() != delta.len() {
        return Err(Error::Config(format!(
            "{} weight layers but {} delta layers",
            weights.len(),
            delta.len()
        )));
    }
    let report = model.grad_wrt_merged(weights, batch)?;
    let moved = weights
        .iter()
        .zip(delta)
        .map(|(w, d)| w.add(d))
        .collect::<Result<Vec<_>>>()?;
    let after = model.forward_loss(&moved, batch)?;
    let mut linear = 0.0;
    for (g, d) in report.grads.iter().zip(delta) {
        linear += frobenius_inner(g, d)?;
    }
    Ok((after - report.loss - linear).abs())
}

/// Least-squares slope of `ln(values)` against `ln(scales)`.
pub fn loglog_slope(scales: &[f64], values: &[f64]) -> Result<f64> {
    if scales.len() != values.len() || scales.len() < 2 {
        return Err(Error::Input(
            "slope needs at least two paired points".into(),
        ));
    }
    if scales.iter().chain(values).any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("log-log slope needs positive values".into()));
    }
    let xs: Vec<f64> = scales.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Ways of applying a Hessian.
pub enum HessianAccess<'a> {
    Dense(&'a Matrix),
    /// Hessian of a model's batch loss at the given weights, applied
    /// through [`Model::hessian_vector`]. The flattened delta is split
    /// across layers in layer order, row-major.
    Model {
        model: &'a Model,
        weights: &'a [Matrix],
        batch: &'a Batch,
    },
}

/// `δᵀ·H·δ` from one Hessian-vector product.
pub fn quad_interference(h: &HessianAccess<'_>, delta: &[f64]) -> Result<f64> {
    if delta.iter().all(|&d| d == 0.0) {
        return Err(Error::Input(
            "interference of a zero increment is undefined".into(),
        ));
    }
    let hv: Vec<f64> = match h {
        HessianAccess::Dense(m) => m.mul_vec(delta)?,
        HessianAccess::Model {
            model,
            weights,
            batch,
        } => {
            let total: usize = weights.iter().map(Matrix::len).sum();
            if total != delta.len() {
                return Err(Error::dim(
                    "quad_interference",
                    (total, 1),
                    (delta.len(), 1),
                ));
            }
            let mut offset = 0;
            let mut v = Vec::with_capacity(weights.len());
            for w in weights.iter() {
                v.push(Matrix::from_vec(
                    w.rows(),
                    w.cols(),
                    delta[offset..offset + w.len()].to_vec(),
                )?);
                offset += w.len();
            }
            model
                .hessian_vector(weights, batch, &v)?
                .into_iter()
                .flat_map(Matrix::into_data)
                .collect()
        }
    };
    Ok(delta.iter().zip(&hv).map(|(a, b)| a * b).sum())
}

/// Outcome of comparing a GPWC vector with `H_A·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub relative_error: f64,
    /// True when both sides vanish (equal optima); the error is then 0.
    pub degenerate: bool,
    pub gpwc_norm: f64,
}

/// Tangent of the interpolated optimum, `v = −dθ*(λ)/dλ` at `λ = 0`, for
/// `L_λ = L_A + λ(L_B − L_A)` with quadratic losses. Implicit
/// differentiation of the stationarity condition gives `H_A·v = H_B(θ_A* − θ_B*)`.
pub fn interpolation_tangent(
    hessian_a: &Matrix,
    hessian_b: &Matrix,
    theta_a: &[f64],
    theta_b: &[f64],
) -> Result<Vec<f64>> {
    let gap: Vec<f64> = theta_a.iter().zip(theta_b).map(|(a, b)| a - b).collect();
    let g = hessian_b.mul_vec(&gap)?;
    solve(hessian_a, &g)
}

/// Minimizer of the interpolated quadratic `L_A + λ(L_B − L_A)`.
pub fn interpolated_optimum(
    hessian_a: &Matrix,
    hessian_b: &Matrix,
    theta_a: &[f64],
    theta_b: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    let h = hessian_a
        .scale(1.0 - lambda)
        .add(&hessian_b.scale(lambda))?;
    let ha = hessian_a.mul_vec(theta_a)?;
    let hb = hessian_b.mul_vec(theta_b)?;
    let rhs: Vec<f64> = ha
        .iter()
        .zip(&hb)
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    solve(&h, &rhs)
}

fn quad_parts(stream: &TaskStream) -> Result<(Matrix, Matrix, Vec<f64>, Vec<f64>)> {
    if stream.len() < 2 {
        return Err(Error::Input(
            "identity check needs a two-task quadratic stream".into(),
        ));
    }
    let (a, b) = (&stream.tasks[0], &stream.tasks[1]);
    let missing =
        || Error::Input("identity check needs tasks with known optima and Hessians".into());
    Ok((
        a.hessian.clone().ok_or_else(missing)?,
        b.hessian.clone().ok_or_else(missing)?,
        a.optimum.clone().ok_or_else(missing)?,
        b.optimum.clone().ok_or_else(missing)?,
    ))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn compare(gpwc: &[f64], target: &[f64]) -> IdentityCheck {
    let gpwc_norm = norm(gpwc);
    let target_norm = norm(target);
    if gpwc_norm == 0.0 && target_norm == 0.0 {
        return IdentityCheck {
            relative_error: 0.0,
            degenerate: true,
            gpwc_norm,
        };
    }
    let diff: Vec<f64> = gpwc.iter().zip(target).map(|(a, b)| a - b).collect();
    IdentityCheck {
        relative_error: norm(&diff) / target_norm,
        degenerate: false,
        gpwc_norm,
    }
}

/// Population form: `g = H_B(θ_A* − θ_B*)` against `H_A·v`.
pub fn gpwc_identity_check(stream: &TaskStream) -> Result<IdentityCheck> {
    let (ha, hb, ta, tb) = quad_parts(stream)?;
    let gap: Vec<f64> = ta.iter().zip(&tb).map(|(a, b)| a - b).collect();
    let g = hb.mul_vec(&gap)?;
    let v = interpolation_tangent(&ha, &hb, &ta, &tb)?;
    Ok(compare(&g, &ha.mul_vec(&v)?))
}

/// Empirical form: the gradient of task B's sampled training loss at
/// `θ_A*` against the population `H_A·v`.
pub fn gpwc_identity_check_empirical(model: &Model, stream: &TaskStream) -> Result<IdentityCheck> {
    let (ha, hb, ta, tb) = quad_parts(stream)?;
    let w = Matrix::from_vec(1, ta.len(), ta.clone())?;
    let report = model.grad_wrt_merged(&[w], &stream.tasks[1].train)?;
    let g: Vec<f64> = report
        .grads
        .into_iter()
        .flat_map(Matrix::into_data)
        .collect();
    let v = interpolation_tangent(&ha, &hb, &ta, &tb)?;
    Ok(compare(&g, &ha.mul_vec(&v)?))
}
