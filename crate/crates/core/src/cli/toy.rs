//! Two-task linear-regression demo with exact population losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::LoraConfig;
use crate::metrics::{gpwc_identity_check, IdentityCheck};
use crate::models::ModelSpec;
use crate::regularizers::RegWeights;
use crate::tasks::{gen_quadratic_pair, QuadraticPair, SubsetPlan, SubsetSize, TaskStream};
use crate::trainer::{
    run_continual_observed, BaseInit, OptimConfig, OptimMethod, RunArtifacts, RunSetup, Strategy,
    StrategyName,
};

/// Settings of a quadratic-pair run. The constrained arm trains in a single
/// stage so that task B starts exactly at the task-A solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub optim: OptimConfig,
    pub lora: LoraConfig,
    /// Share of the training set the snapshot is computed on.
    pub d2_fraction: f64,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.0,
            // Momentum overshoots the kink of the absolute penalty.
            optim: OptimConfig {
                method: OptimMethod::Sgd,
                epochs_stage1: 40,
                ..OptimConfig::default()
            },
            lora: LoraConfig {
                rank: 1,
                ..LoraConfig::default()
            },
            d2_fraction: 1.0,
            seed: 0,
        }
    }
}

impl PairConfig {
    pub fn strategy(&self, name: StrategyName) -> Strategy {
        Strategy {
            reg: RegWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            two_stage: false,
            ..Strategy::new(name)
        }
        .canonical()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub weights: Vec<f64>,
    pub loss_a: f64,
    pub loss_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRun {
    pub trajectory: Vec<TrajectoryPoint>,
    /// Weights after task A and after task B.
    pub after_a: Vec<f64>,
    pub after_b: Vec<f64>,
    pub excess_a: f64,
    pub excess_b: f64,
    pub artifacts: RunArtifacts,
}

/// `½(w − θ)ᵀH(w − θ)`, the population excess loss of a noiseless-optimum
/// quadratic task.
pub fn excess_loss(hessian: &Matrix, optimum: &[f64], w: &[f64]) -> Result<f64> {
    let d: Vec<f64> = w.iter().zip(optimum).map(|(a, b)| a - b).collect();
    let hd = hessian.mul_vec(&d)?;
    Ok(0.5 * d.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>())
}

fn known(stream: &TaskStream, k: usize) -> Result<(&Matrix, &[f64])> {
    let t = &stream.tasks[k];
    match (&t.hessian, &t.optimum) {
        (Some(h), Some(o)) => Ok((h, o)),
        _ => Err(Error::Input(
            "quadratic run needs tasks with known optima and Hessians".into(),
        )),
    }
}

/// Trains task A then task B with the given strategy and records every
/// step's merged weights with both population losses.
pub fn run_pair(stream: &TaskStream, name: StrategyName, cfg: &PairConfig) -> Result<PairRun> {
    if stream.len() != 2 {
        return Err(Error::Input(format!(
            "a quadratic pair has 2 tasks, got {}",
            stream.len()
        )));
    }
    let (ha, ta) = known(stream, 0)?;
    let (hb, tb) = known(stream, 1)?;
    let dim = ta.len();
    let setup = RunSetup {
        base_init: BaseInit::Zeros,
        ..RunSetup::new(ModelSpec::linear_regression(dim, 1), cfg.lora.clone())
    };
    let mut trajectory = Vec::new();
    let mut after_a = vec![0.0; dim];
    let mut failure = None;
    let mut observe = |view: &crate::trainer::StepView<'_>| {
        if failure.is_some() {
            return;
        }
        let point = view.merged().and_then(|m| {
            let w = m[0].data().to_vec();
            Ok(TrajectoryPoint {
                step: trajectory.len(),
                loss_a: excess_loss(ha, ta, &w)?,
                loss_b: excess_loss(hb, tb, &w)?,
                weights: w,
            })
        });
        match point {
            Ok(p) => {
                if view.task == 1 {
                    after_a = p.weights.clone();
                }
                trajectory.push(p);
            }
            Err(e) => failure = Some(e),
        }
    };
    let artifacts = run_continual_observed(
        &setup,
        stream,
        &cfg.strategy(name),
        &cfg.optim,
        &SubsetPlan {
            d2: SubsetSize::Fraction(cfg.d2_fraction),
            seed: cfg.seed,
        },
        cfg.seed,
        &mut observe,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let after_b = trajectory
        .last()
        .map(|p| p.weights.clone())
        .unwrap_or_else(|| vec![0.0; dim]);
    Ok(PairRun {
        excess_a: excess_loss(ha, ta, &after_b)?,
        excess_b: excess_loss(hb, tb, &after_b)?,
        trajectory,
        after_a,
        after_b,
        artifacts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyOutcome {
    pub seq_ft: PairRun,
    pub hifgo: PairRun,
    pub identity: IdentityCheck,
}

/// The isotropic 2-D pair with optima `(1, 0)` and `(0, 1)`.
pub fn run_toy(cfg: &PairConfig) -> Result<ToyOutcome> {
    let stream = gen_quadratic_pair(&QuadraticPair::toy(), cfg.seed)?;
    Ok(ToyOutcome {
        seq_ft: run_pair(&stream, StrategyName::SeqFt, cfg)?,
        hifgo: run_pair(&stream, StrategyName::HifgoProxy, cfg)?,
        identity: gpwc_identity_check(&stream)?,
    })
}

/// Trajectory CSV with columns `strategy,step,w1,w2,...,loss_A,loss_B`.
pub fn trajectory_csv(runs: &[(&str, &PairRun)]) -> Result<String> {
    let dim = runs.first().map_or(0, |r| r.1.after_b.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["strategy".to_string(), "step".to_string()];
    header.extend((1..=dim).map(|k| format!("w{k}")));
    header.push("loss_A".into());
    header.push("loss_B".into());
    w.write_record(&header)
        .map_err(|e| Error::Input(e.to_string()))?;
    for (label, run) in runs {
        for p in &run.trajectory {
            let mut rec = vec![label.to_string(), p.step.to_string()];
            rec.extend(p.weights.iter().map(f64::to_string));
            rec.push(p.loss_a.to_string());
            rec.push(p.loss_b.to_string());
            w.write_record(&rec)
                .map_err(|e| Error::Input(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn excess_is_zero_at_the_optimum() {
        let h = Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]);
        assert_eq!(excess_loss(&h, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(excess_loss(&h, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.5);
    }

    #[test]
    fn toy_trajectories_cover_both_tasks() {
        let out = run_toy(&PairConfig::default()).unwrap();
        assert!(out.identity.relative_error <= 1e-8);
        let csv = trajectory_csv(&[("seq-ft", &out.seq_ft), ("hifgo-proxy", &out.hifgo)]).unwrap();
        assert!(csv.starts_with("strategy,step,w1,w2,loss_A,loss_B\n"));
        let rows = out.seq_ft.trajectory.len() + out.hifgo.trajectory.len();
        assert_eq!(csv.lines().count(), rows + 1);
        assert!(out.hifgo.excess_a < out.seq_ft.excess_a);
    }
}
