//! Optimizer, the two-stage task loop, and the strategy registry.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix, RngStream};
use crate::lora::{
    freeze_delta, init_adapter, merge, BaseWeights, DeltaStack, LoraAdapter, LoraConfig,
};
use crate::metrics::PerfMatrix;
use crate::models::{Batch, FactorGrad, Model, ModelSpec};
use crate::regularizers::{
    compute_gpwc, history_snapshots, norm_loss, orth_loss_full, orth_loss_proxy, param_orth_loss,
    GpwcSnapshot, OrthPenalty, RegTerm, RegWeights,
};
use crate::tasks::{select_subsets, SubsetPlan, TaskStream};

// Stream tags for the per-run random streams.
const TAG_INIT: u64 = 1;
const TAG_FRESH: u64 = 2;
const TAG_SHUFFLE: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimMethod {
    Sgd,
    #[default]
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub method: OptimMethod,
    pub lr: f64,
    pub momentum: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: OptimMethod::SgdMomentum,
            lr: 0.05,
            momentum: 0.9,
            epochs_stage1: 1,
            epochs_stage2: 3,
            batch_size: 16,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "optim.lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "optim.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Momentum actually applied; plain SGD ignores the configured value.
    pub fn beta(&self) -> f64 {
        match self.method {
            OptimMethod::Sgd => 0.0,
            OptimMethod::SgdMomentum => self.momentum,
        }
    }
}

/// Velocity buffers, one pair per adapter layer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<FactorGrad>,
}

impl OptimState {
    pub fn new(adapter: &LoraAdapter) -> Self {
        Self {
            velocity: adapter
                .layers
                .iter()
                .map(|l| FactorGrad {
                    b: Matrix::zeros(l.b.rows(), l.b.cols()),
                    a: Matrix::zeros(l.a.rows(), l.a.cols()),
                })
                .collect(),
        }
    }
}

/// `v ← g + β·v`, then `θ ← θ − lr·v`, for both factors of every layer.
pub fn sgd_step(
    adapter: &LoraAdapter,
    grads: &[FactorGrad],
    state: &mut OptimState,
    optim: &OptimConfig,
) -> Result<LoraAdapter> {
    if grads.len() != adapter.layers.len() || state.velocity.len() != adapter.layers.len() {
        return Err(Error::Config(format!(
            "{} gradients and {} velocities for {} layers",
            grads.len(),
            state.velocity.len(),
            adapter.layers.len()
        )));
    }
    let beta = optim.beta();
    let mut out = adapter.clone();
    for ((layer, g), v) in out
        .layers
        .iter_mut()
        .zip(grads)
        .zip(state.velocity.iter_mut())
    {
        v.b = g.b.add(&v.b.scale(beta))?;
        v.a = g.a.add(&v.a.scale(beta))?;
        layer.b.add_scaled_assign(-optim.lr, &v.b)?;
        layer.a.add_scaled_assign(-optim.lr, &v.a)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    HifgoFull,
    HifgoProxy,
    SeqFt,
    ParamOrth,
    HistGradOrth,
    MultiTask,
}

impl StrategyName {
    pub const ALL: [StrategyName; 6] = [
        StrategyName::HifgoFull,
        StrategyName::HifgoProxy,
        StrategyName::SeqFt,
        StrategyName::ParamOrth,
        StrategyName::HistGradOrth,
        StrategyName::MultiTask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::HifgoFull => "hifgo-full",
            StrategyName::HifgoProxy => "hifgo-proxy",
            StrategyName::SeqFt => "seq-ft",
            StrategyName::ParamOrth => "param-orth",
            StrategyName::HistGradOrth => "hist-grad-orth",
            StrategyName::MultiTask => "multi-task",
        }
    }

    pub fn known_names() -> String {
        Self::ALL
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}`; known: {}",
                    Self::known_names()
                ))
            })
    }
}

/// Starting point of the constrained stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Init {
    /// Continue from the stage-1 adapter.
    #[default]
    Copy,
    /// Re-initialize, so the stage starts at the merged previous model.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Strategy {
    pub name: StrategyName,
    pub reg: RegWeights,
    pub two_stage: bool,
    pub stage2_init: Stage2Init,
    pub orth_penalty: OrthPenalty,
    pub normalize_gpwc: bool,
}

impl Default for Strategy {
    fn default() -> Self {
        Self::new(StrategyName::HifgoProxy)
    }
}

impl Strategy {
    pub fn new(name: StrategyName) -> Self {
        Self {
            name,
            reg: RegWeights::default(),
            two_stage: true,
            stage2_init: Stage2Init::Copy,
            orth_penalty: OrthPenalty::Abs,
            normalize_gpwc: false,
        }
        .canonical()
    }

    /// Applies the fixed settings of the baselines: seq-ft trains in one
    /// unregularized stage; multi-task ignores regularization and staging.
    pub fn canonical(mut self) -> Self {
        match self.name {
            StrategyName::SeqFt => {
                self.reg = RegWeights::ZERO;
                self.two_stage = false;
            }
            StrategyName::MultiTask => {
                self.reg = RegWeights::ZERO;
                self.two_stage = false;
            }
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.reg.validate()
    }

    fn uses_snapshots(&self) -> bool {
        matches!(
            self.name,
            StrategyName::HifgoFull | StrategyName::HifgoProxy | StrategyName::HistGradOrth
        )
    }
}

/// How the base weights of a run are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseInit {
    /// Entries `~ N(0, gain²/fan_in)`.
    #[default]
    Gaussian,
    Zeros,
}

/// Everything about the model that is fixed for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSetup {
    pub model: ModelSpec,
    #[serde(default)]
    pub base_init: BaseInit,
    #[serde(default = "default_gain")]
    pub base_gain: f64,
    #[serde(default)]
    pub lora: LoraConfig,
}

fn default_gain() -> f64 {
    1.0
}

impl RunSetup {
    pub fn new(model: ModelSpec, lora: LoraConfig) -> Self {
        Self {
            model,
            base_init: BaseInit::Gaussian,
            base_gain: 1.0,
            lora,
        }
    }

    pub fn base_weights(&self, seed: u64) -> Result<BaseWeights> {
        self.model.validate()?;
        let mut rng = RngStream::new(seed, 0x4241_5345);
        let weights = self
            .model
            .layer_shapes()
            .iter()
            .map(|s| match self.base_init {
                BaseInit::Gaussian => gaussian_matrix(
                    &mut rng,
                    s.rows,
                    s.cols,
                    self.base_gain / (s.cols as f64).sqrt(),
                ),
                BaseInit::Zeros => Matrix::zeros(s.rows, s.cols),
            })
            .collect();
        Ok(BaseWeights::new(weights))
    }
}

/// One optimizer step's loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub task: usize,
    pub stage: u8,
    pub step: usize,
    pub ce: f64,
    pub orth: f64,
    pub norm: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub task: usize,
    pub source: usize,
    /// Per-layer Frobenius norms before any normalization.
    pub layer_norms: Vec<f64>,
    pub norm: f64,
}

/// Regularizer work done during a task's constrained stage.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounter {
    pub task: usize,
    pub steps: usize,
    /// Inner-product constraint sets evaluated, summed over steps.
    pub sets_total: usize,
    pub sets_per_step_min: usize,
    pub sets_per_step_max: usize,
    pub snapshots_captured: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAdapters {
    pub task: usize,
    pub stage1: Option<LoraAdapter>,
    pub stage2: LoraAdapter,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub per_task_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub stack: DeltaStack,
    pub adapters: Vec<TaskAdapters>,
    pub perf: PerfMatrix,
    pub trace: Vec<TraceRow>,
    pub snapshots: Vec<SnapshotRecord>,
    pub counters: Vec<StageCounter>,
    /// Wall-clock data; excluded from [`RunArtifacts::deterministic_bytes`].
    pub timing: Timing,
}

#[derive(Serialize)]
struct DeterministicView<'a> {
    stack: &'a DeltaStack,
    adapters: &'a [TaskAdapters],
    perf: &'a PerfMatrix,
    trace: &'a [TraceRow],
    snapshots: &'a [SnapshotRecord],
    counters: &'a [StageCounter],
}

impl RunArtifacts {
    /// Canonical serialization of everything except timing. Floats are
    /// written in shortest round-trip form, so equal bytes mean equal bits.
    pub fn deterministic_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&DeterministicView {
            stack: &self.stack,
            adapters: &self.adapters,
            perf: &self.perf,
            trace: &self.trace,
            snapshots: &self.snapshots,
            counters: &self.counters,
        })
        .expect("artifacts serialize")
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        write_trace_csv(w, &self.trace)
    }
}

/// Trace as CSV with columns `task,stage,step,ce,orth,norm,total`.
pub fn write_trace_csv<W: Write>(w: W, trace: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in trace {
        out.serialize(row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}

/// Result of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub adapter: LoraAdapter,
    pub trace: Vec<TraceRow>,
    pub counter: StageCounter,
}

/// Where a stage's minibatch order comes from.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub seed: u64,
    pub task: usize,
    pub stage: u8,
    pub epochs: usize,
}

impl Schedule {
    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        RngStream::new(self.seed, 0)
            .derive_path(&[
                TAG_SHUFFLE,
                self.task as u64,
                self.stage as u64,
                epoch as u64,
            ])
            .shuffle(&mut idx);
        idx
    }
}

fn add_scaled_factor_grads(into: &mut [FactorGrad], alpha: f64, term: &RegTerm) -> Result<()> {
    for (g, t) in into.iter_mut().zip(&term.factor_grads) {
        g.b.add_scaled_assign(alpha, &t.b)?;
        g.a.add_scaled_assign(alpha, &t.a)?;
    }
    Ok(())
}

/// State after one optimizer step, handed to run observers.
pub struct StepView<'a> {
    pub task: usize,
    pub stage: u8,
    pub step: usize,
    pub base: &'a BaseWeights,
    pub stack: &'a DeltaStack,
    pub adapter: &'a LoraAdapter,
}

impl StepView<'_> {
    /// Weights the model is being trained at.
    pub fn merged(&self) -> Result<Vec<Matrix>> {
        merge(self.base, self.stack, Some(self.adapter))
    }
}

/// Observer that ignores every step.
pub fn no_observer(_: &StepView<'_>) {}

/// Minibatch SGD on `ce + λ1·orth + λ2·norm` at `merge(base, stack, adapter)`.
#[allow(clippy::too_many_arguments)]
fn train_stage(
    model: &Model,
    base: &BaseWeights,
    stack: &DeltaStack,
    mut adapter: LoraAdapter,
    data: &Batch,
    orth: &dyn Fn(&LoraAdapter) -> Result<Option<RegTerm>>,
    reg: RegWeights,
    optim: &OptimConfig,
    schedule: &Schedule,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<StageOutcome> {
    optim.validate()?;
    if data.is_empty() {
        return Err(Error::Input(format!(
            "stage {} has no training data",
            schedule.stage
        )));
    }
    let mut state = OptimState::new(&adapter);
    let mut trace = Vec::new();
    let mut counter = StageCounter {
        task: schedule.task,
        sets_per_step_min: usize::MAX,
        ..StageCounter::default()
    };
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        let order = schedule.epoch_order(data.len(), epoch);
        for chunk in order.chunks(optim.batch_size) {
            let batch = data.select(chunk);
            let fail = |e: Error| match e {
                Error::Numeric(m) => {
                    Error::Numeric(format!("stage {} step {step}: {m}", schedule.stage))
                }
                other => other,
            };
            let report = model
                .grad_wrt_factors(base, stack, &adapter, &batch)
                .map_err(fail)?;
            let mut grads = report.factor_grads.expect("factor gradients requested");
            let mut orth_value = 0.0;
            let mut sets = 0;
            if let Some(term) = orth(&adapter)? {
                orth_value = term.value;
                sets = term.sets;
                add_scaled_factor_grads(&mut grads, reg.lambda1, &term)?;
            }
            let norm = norm_loss(&adapter)?;
            if reg.lambda2 != 0.0 {
                add_scaled_factor_grads(&mut grads, reg.lambda2, &norm)?;
            }
            let total = report.loss + reg.lambda1 * orth_value + reg.lambda2 * norm.value;
            if !total.is_finite() {
                return Err(fail(Error::Numeric("non-finite objective".into())));
            }
            adapter = sgd_step(&adapter, &grads, &mut state, optim)?;
            if !adapter.is_finite() {
                return Err(fail(Error::Numeric(
                    "non-finite adapter after update".into(),
                )));
            }
            observer(&StepView {
                task: schedule.task,
                stage: schedule.stage,
                step,
                base,
                stack,
                adapter: &adapter,
            });
            trace.push(TraceRow {
                task: schedule.task,
                stage: schedule.stage,
                step,
                ce: report.loss,
                orth: orth_value,
                norm: norm.value,
                total,
            });
            counter.steps += 1;
            counter.sets_total += sets;
            counter.sets_per_step_min = counter.sets_per_step_min.min(sets);
            counter.sets_per_step_max = counter.sets_per_step_max.max(sets);
            step += 1;
        }
    }
    if counter.steps == 0 {
        counter.sets_per_step_min = 0;
    }
    Ok(StageOutcome {
        adapter,
        trace,
        counter,
    })
}

/// Free stage: plain task loss at `W0 + scale·B·A`, earlier deltas excluded.
pub fn stage1_finetune(
    model: &Model,
    base: &BaseWeights,
    adapter: LoraAdapter,
    d1: &Batch,
    optim: &OptimConfig,
    schedule: &Schedule,
) -> Result<StageOutcome> {
    train_stage(
        model,
        base,
        &DeltaStack::new(),
        adapter,
        d1,
        &|_| Ok(None),
        RegWeights::ZERO,
        optim,
        schedule,
        &mut no_observer,
    )
}

/// Constrained stage at `merge(base, stack, adapter)`. `snapshots` must
/// hold one entry per earlier task for the full and history arms, and at
/// least the most recent one for the proxy arm, whenever `λ1 > 0`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_finetune(
    model: &Model,
    base: &BaseWeights,
    stack: &DeltaStack,
    adapter: LoraAdapter,
    d2: &Batch,
    snapshots: &[GpwcSnapshot],
    strategy: &Strategy,
    optim: &OptimConfig,
    schedule: &Schedule,
) -> Result<StageOutcome> {
    stage2_observed(
        model,
        base,
        stack,
        adapter,
        d2,
        snapshots,
        strategy,
        optim,
        schedule,
        &mut no_observer,
    )
}

#[allow(clippy::too_many_arguments)]
fn stage2_observed(
    model: &Model,
    base: &BaseWeights,
    stack: &DeltaStack,
    adapter: LoraAdapter,
    d2: &Batch,
    snapshots: &[GpwcSnapshot],
    strategy: &Strategy,
    optim: &OptimConfig,
    schedule: &Schedule,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<StageOutcome> {
    strategy.validate()?;
    let previous = stack.len();
    let active = strategy.reg.lambda1 > 0.0 && previous > 0;
    if active && strategy.uses_snapshots() {
        let needed = if strategy.name == StrategyName::HifgoProxy {
            1
        } else {
            previous
        };
        if snapshots.len() < needed {
            return Err(Error::Config(format!(
                "{} needs {needed} snapshots at task {}, got {}",
                strategy.name,
                previous + 1,
                snapshots.len()
            )));
        }
    }
    let penalty = strategy.orth_penalty;
    let orth = |ad: &LoraAdapter| -> Result<Option<RegTerm>> {
        if !active {
            return Ok(None);
        }
        let term = match strategy.name {
            StrategyName::HifgoFull | StrategyName::HistGradOrth => {
                orth_loss_full(snapshots, ad, penalty)?
            }
            StrategyName::HifgoProxy => {
                orth_loss_proxy(snapshots.last().expect("checked above"), ad, penalty)?
            }
            StrategyName::ParamOrth => param_orth_loss(stack, ad, penalty)?,
            StrategyName::SeqFt | StrategyName::MultiTask => return Ok(None),
        };
        Ok(Some(term))
    };
    let mut out = train_stage(
        model,
        base,
        stack,
        adapter,
        d2,
        &orth,
        strategy.reg,
        optim,
        schedule,
        observer,
    )?;
    out.counter.snapshots_captured = snapshots.len();
    Ok(out)
}

fn evaluate_row(
    model: &Model,
    weights: &[Matrix],
    stream: &TaskStream,
    t: usize,
    perf: &mut PerfMatrix,
) -> Result<()> {
    for task in &stream.tasks {
        let score = model.evaluate(weights, &task.eval)?;
        perf.set(t, task.id, score.clamp(0.0, 100.0))?;
    }
    Ok(())
}

fn init_for(
    setup: &RunSetup,
    base: &BaseWeights,
    seed: u64,
    task: usize,
    tag: u64,
) -> Result<LoraAdapter> {
    let mut rng = RngStream::new(seed, 0).derive_path(&[tag, task as u64]);
    init_adapter(&base.shapes(), &setup.lora, &mut rng)
}

fn record(snaps: &[GpwcSnapshot]) -> Vec<SnapshotRecord> {
    snaps
        .iter()
        .map(|s| SnapshotRecord {
            task: s.task,
            source: s.source,
            layer_norms: s.layer_norms(),
            norm: s.norm(),
        })
        .collect()
}

/// Snapshots the strategy constrains against at task `i = stack.len() + 1`.
fn capture_snapshots(
    model: &Model,
    base: &BaseWeights,
    stack: &DeltaStack,
    stream: &TaskStream,
    d2: &Batch,
    strategy: &Strategy,
) -> Result<Vec<GpwcSnapshot>> {
    let previous = stack.len();
    let task = previous + 1;
    if previous == 0 || strategy.reg.lambda1 == 0.0 {
        return Ok(Vec::new());
    }
    match strategy.name {
        StrategyName::HifgoFull => (1..=previous)
            .map(|j| compute_gpwc(model, base, &stack.prefix(j), d2, task))
            .collect(),
        StrategyName::HifgoProxy => Ok(vec![compute_gpwc(model, base, stack, d2, task)?]),
        StrategyName::HistGradOrth => {
            let retained: Vec<Batch> = stream.tasks[..previous]
                .iter()
                .map(|t| t.train.clone())
                .collect();
            history_snapshots(model, base, stack, &retained, task)
        }
        _ => Ok(Vec::new()),
    }
}

/// Learns the tasks in order and scores every task after each one.
pub fn run_continual(
    setup: &RunSetup,
    stream: &TaskStream,
    strategy: &Strategy,
    optim: &OptimConfig,
    plan: &SubsetPlan,
    seed: u64,
) -> Result<RunArtifacts> {
    run_continual_observed(setup, stream, strategy, optim, plan, seed, &mut no_observer)
}

/// [`run_continual`] with a callback after every optimizer step.
pub fn run_continual_observed(
    setup: &RunSetup,
    stream: &TaskStream,
    strategy: &Strategy,
    optim: &OptimConfig,
    plan: &SubsetPlan,
    seed: u64,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<RunArtifacts> {
    let strategy = strategy.clone().canonical();
    if strategy.name == StrategyName::MultiTask {
        return run_multitask(setup, stream, optim, seed);
    }
    strategy.validate()?;
    optim.validate()?;
    plan.validate()?;
    let started = Instant::now();
    let base = setup.base_weights(seed)?;
    let model = Model::from_base(setup.model.clone(), &base)?;
    let n = stream.len();
    let mut stack = DeltaStack::new();
    let mut perf = PerfMatrix::new(n);
    let mut adapters = Vec::with_capacity(n);
    let mut trace = Vec::new();
    let mut snapshot_log = Vec::new();
    let mut counters = Vec::with_capacity(n);
    let mut per_task = Vec::with_capacity(n);
    let mut chained: Option<LoraAdapter> = None;

    for (k, task) in stream.tasks.iter().enumerate() {
        let i = k + 1;
        let task_started = Instant::now();
        let result: Result<()> = (|| {
            let subsets = select_subsets(task, plan)?;
            let (stage1, stage2_start, stage2_data, epochs2) = if strategy.two_stage {
                let start = match chained.take() {
                    Some(prev) => prev,
                    None => init_for(setup, &base, seed, i, TAG_INIT)?,
                };
                let sched = Schedule {
                    seed,
                    task: i,
                    stage: 1,
                    epochs: optim.epochs_stage1,
                };
                let s1 = train_stage(
                    &model,
                    &base,
                    &DeltaStack::new(),
                    start,
                    &subsets.d1,
                    &|_| Ok(None),
                    RegWeights::ZERO,
                    optim,
                    &sched,
                    &mut *observer,
                )?;
                trace.extend(s1.trace);
                let init = match strategy.stage2_init {
                    Stage2Init::Copy => s1.adapter.clone(),
                    Stage2Init::Fresh => init_for(setup, &base, seed, i, TAG_FRESH)?,
                };
                chained = Some(s1.adapter.clone());
                (Some(s1.adapter), init, &subsets.d2, optim.epochs_stage2)
            } else {
                let init = init_for(setup, &base, seed, i, TAG_INIT)?;
                (None, init, &subsets.d1, optim.epochs_stage1)
            };

            let raw = capture_snapshots(&model, &base, &stack, stream, &subsets.d2, &strategy)?;
            snapshot_log.extend(record(&raw));
            let snaps: Vec<GpwcSnapshot> = if strategy.normalize_gpwc {
                raw.iter().map(GpwcSnapshot::normalized).collect()
            } else {
                raw
            };
            let sched = Schedule {
                seed,
                task: i,
                stage: 2,
                epochs: epochs2,
            };
            let s2 = stage2_observed(
                &model,
                &base,
                &stack,
                stage2_start,
                stage2_data,
                &snaps,
                &strategy,
                optim,
                &sched,
                &mut *observer,
            )?;
            trace.extend(s2.trace);
            counters.push(s2.counter);
            stack = freeze_delta(&s2.adapter, &stack);
            adapters.push(TaskAdapters {
                task: i,
                stage1,
                stage2: s2.adapter,
            });
            let merged = merge(&base, &stack, None)?;
            evaluate_row(&model, &merged, stream, i, &mut perf)
        })();
        result.map_err(|e| e.in_task(i))?;
        per_task.push(task_started.elapsed().as_secs_f64());
    }

    Ok(RunArtifacts {
        stack,
        adapters,
        perf,
        trace,
        snapshots: snapshot_log,
        counters,
        timing: Timing {
            wall_seconds: started.elapsed().as_secs_f64(),
            per_task_seconds: per_task,
        },
    })
}

/// One adapter trained on the union of all training sets. Only the last
/// row of the score matrix is filled.
pub fn run_multitask(
    setup: &RunSetup,
    stream: &TaskStream,
    optim: &OptimConfig,
    seed: u64,
) -> Result<RunArtifacts> {
    optim.validate()?;
    let started = Instant::now();
    let base = setup.base_weights(seed)?;
    let model = Model::from_base(setup.model.clone(), &base)?;
    let n = stream.len();
    if n == 0 {
        return Err(Error::Input("empty task stream".into()));
    }
    let parts: Vec<&Batch> = stream.tasks.iter().map(|t| &t.train).collect();
    let union = Batch::concat(&parts)?;
    let init = init_for(setup, &base, seed, 1, TAG_INIT)?;
    let sched = Schedule {
        seed,
        task: 1,
        stage: 2,
        epochs: optim.epochs_stage1,
    };
    let strategy = Strategy::new(StrategyName::MultiTask);
    let out = stage2_finetune(
        &model,
        &base,
        &DeltaStack::new(),
        init,
        &union,
        &[],
        &strategy,
        optim,
        &sched,
    )?;
    let stack = freeze_delta(&out.adapter, &DeltaStack::new());
    let mut perf = PerfMatrix::new(n);
    let merged = merge(&base, &stack, None)?;
    evaluate_row(&model, &merged, stream, n, &mut perf)?;
    let mut counter = out.counter;
    counter.task = n;
    Ok(RunArtifacts {
        stack,
        adapters: vec![TaskAdapters {
            task: n,
            stage1: None,
            stage2: out.adapter,
        }],
        perf,
        trace: out.trace,
        snapshots: Vec::new(),
        counters: vec![counter],
        timing: Timing {
            wall_seconds: started.elapsed().as_secs_f64(),
            per_task_seconds: vec![started.elapsed().as_secs_f64()],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{LayerShape, LoraLayer};
    use crate::models::ModelSpec;
    use crate::tasks::{
        gen_quadratic_pair, gen_rotated_gaussians, QuadraticPair, RotatedGaussians,
    };

    fn tiny_adapter() -> LoraAdapter {
        LoraAdapter {
            layers: vec![LoraLayer {
                b: Matrix::from_rows(&[[1.0], [2.0]]),
                a: Matrix::from_rows(&[[0.5, -1.0]]),
            }],
            rank: 1,
            scale: 1.0,
        }
    }

    #[test]
    fn sgd_step_examples() {
        let ad = tiny_adapter();
        let mut st = OptimState::new(&ad);
        let zero = vec![FactorGrad {
            b: Matrix::zeros(2, 1),
            a: Matrix::zeros(1, 2),
        }];
        let cfg = OptimConfig::default();
        let out = sgd_step(&ad, &zero, &mut st, &cfg).unwrap();
        assert_eq!(out, ad);

        let mut st = OptimState::new(&ad);
        st.velocity[0].b = Matrix::from_rows(&[[1.0], [1.0]]);
        sgd_step(&ad, &zero, &mut st, &cfg).unwrap();
        assert_eq!(st.velocity[0].b, Matrix::from_rows(&[[0.9], [0.9]]));

        let plain = OptimConfig {
            method: OptimMethod::Sgd,
            lr: 1.0,
            ..OptimConfig::default()
        };
        let g = vec![FactorGrad {
            b: ad.layers[0].b.clone(),
            a: Matrix::zeros(1, 2),
        }];
        let out = sgd_step(&ad, &g, &mut OptimState::new(&ad), &plain).unwrap();
        assert_eq!(out.layers[0].b, Matrix::zeros(2, 1));
    }

    #[test]
    fn two_momentum_steps_by_hand() {
        let ad = tiny_adapter();
        let cfg = OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            ..OptimConfig::default()
        };
        let g1 = vec![FactorGrad {
            b: Matrix::from_rows(&[[1.0], [0.0]]),
            a: Matrix::from_rows(&[[0.0, 2.0]]),
        }];
        let g2 = vec![FactorGrad {
            b: Matrix::from_rows(&[[0.5], [1.0]]),
            a: Matrix::from_rows(&[[1.0, 0.0]]),
        }];
        let mut st = OptimState::new(&ad);
        let one = sgd_step(&ad, &g1, &mut st, &cfg).unwrap();
        let two = sgd_step(&one, &g2, &mut st, &cfg).unwrap();
        // v1 = g1; v2 = g2 + 0.9 g1; θ2 = θ0 − 0.1 (v1 + v2).
        let b0 = [1.0, 2.0];
        let a0 = [0.5, -1.0];
        let vb1 = [1.0, 0.0];
        let va1 = [0.0, 2.0];
        let vb2 = [0.5 + 0.9 * 1.0, 1.0 + 0.0];
        let va2 = [1.0 + 0.0, 0.0 + 0.9 * 2.0];
        for r in 0..2 {
            let want = b0[r] - 0.1 * vb1[r] - 0.1 * vb2[r];
            assert!((two.layers[0].b.get(r, 0) - want).abs() < 1e-15);
            let want = a0[r] - 0.1 * va1[r] - 0.1 * va2[r];
            assert!((two.layers[0].a.get(0, r) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for n in StrategyName::ALL {
            assert_eq!(n.as_str().parse::<StrategyName>().unwrap(), n);
        }
        let err = "ewc".parse::<StrategyName>().unwrap_err().to_string();
        assert!(err.contains("hifgo-proxy") && err.contains("seq-ft"));
        let s = Strategy::new(StrategyName::SeqFt);
        assert_eq!(s.reg, RegWeights::ZERO);
        assert!(!s.two_stage);
    }

    fn quad_setup() -> (RunSetup, TaskStream) {
        let setup = RunSetup {
            base_init: BaseInit::Zeros,
            ..RunSetup::new(
                ModelSpec::linear_regression(2, 1),
                LoraConfig {
                    rank: 1,
                    scale: 1.0,
                    init_std: 0.5,
                },
            )
        };
        (setup, gen_quadratic_pair(&QuadraticPair::toy(), 3).unwrap())
    }

    #[test]
    fn zero_learning_rate_leaves_adapter_unchanged() {
        let (setup, stream) = quad_setup();
        let base = setup.base_weights(0).unwrap();
        let model = Model::from_base(setup.model.clone(), &base).unwrap();
        let ad = init_for(&setup, &base, 0, 1, TAG_INIT).unwrap();
        let cfg = OptimConfig {
            lr: 0.0,
            ..OptimConfig::default()
        };
        let sched = Schedule {
            seed: 0,
            task: 1,
            stage: 1,
            epochs: 2,
        };
        let out = stage1_finetune(
            &model,
            &base,
            ad.clone(),
            &stream.tasks[0].train,
            &cfg,
            &sched,
        )
        .unwrap();
        assert_eq!(out.adapter, ad);
    }

    #[test]
    fn full_batch_descent_is_monotone_on_a_quadratic() {
        let (setup, stream) = quad_setup();
        let base = setup.base_weights(0).unwrap();
        let model = Model::from_base(setup.model.clone(), &base).unwrap();
        let data = &stream.tasks[0].train;
        let mut ad = init_for(&setup, &base, 0, 1, TAG_INIT).unwrap();
        ad.layers[0].b = Matrix::from_rows(&[[0.1]]);
        let cfg = OptimConfig {
            method: OptimMethod::Sgd,
            lr: 0.1,
            batch_size: data.len(),
            ..OptimConfig::default()
        };
        let theta = stream.tasks[0].optimum.clone().unwrap();
        let dist = |ad: &LoraAdapter| {
            let w = merge(&base, &DeltaStack::new(), Some(ad)).unwrap();
            w[0].data()
                .iter()
                .zip(&theta)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let before = dist(&ad);
        let sched = Schedule {
            seed: 0,
            task: 1,
            stage: 1,
            epochs: 200,
        };
        let out = stage1_finetune(&model, &base, ad, data, &cfg, &sched).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].ce <= w[0].ce + 1e-15);
        }
        assert!(dist(&out.adapter) < before);
    }

    #[test]
    fn zero_weights_reduce_stage2_to_stage1() {
        let (setup, stream) = quad_setup();
        let base = setup.base_weights(0).unwrap();
        let model = Model::from_base(setup.model.clone(), &base).unwrap();
        let mut ad = init_for(&setup, &base, 0, 1, TAG_INIT).unwrap();
        ad.layers[0].b = Matrix::from_rows(&[[0.3]]);
        let sched = Schedule {
            seed: 5,
            task: 1,
            stage: 1,
            epochs: 2,
        };
        let cfg = OptimConfig::default();
        let data = &stream.tasks[1].train;
        let s1 = stage1_finetune(&model, &base, ad.clone(), data, &cfg, &sched).unwrap();
        let strat = Strategy {
            reg: RegWeights::ZERO,
            ..Strategy::new(StrategyName::HifgoFull)
        };
        let s2 = stage2_finetune(
            &model,
            &base,
            &DeltaStack::new(),
            ad,
            data,
            &[],
            &strat,
            &cfg,
            &sched,
        )
        .unwrap();
        assert_eq!(s1.adapter, s2.adapter);
    }

    #[test]
    fn heavy_norm_penalty_shrinks_the_adapter() {
        let (setup, stream) = quad_setup();
        let base = setup.base_weights(0).unwrap();
        let model = Model::from_base(setup.model.clone(), &base).unwrap();
        let mut ad = init_for(&setup, &base, 0, 1, TAG_INIT).unwrap();
        ad.layers[0].b = Matrix::from_rows(&[[1.0]]);
        let before = crate::lora::adapter_norm_sq(&ad);
        let strat = Strategy {
            reg: RegWeights {
                lambda1: 0.0,
                lambda2: 1e3,
            },
            ..Strategy::new(StrategyName::HifgoProxy)
        };
        let cfg = OptimConfig {
            method: OptimMethod::Sgd,
            lr: 1e-5,
            ..OptimConfig::default()
        };
        let sched = Schedule {
            seed: 0,
            task: 1,
            stage: 2,
            epochs: 1,
        };
        let out = stage2_finetune(
            &model,
            &base,
            &DeltaStack::new(),
            ad,
            &stream.tasks[0].train,
            &[],
            &strat,
            &cfg,
            &sched,
        )
        .unwrap();
        assert!(crate::lora::adapter_norm_sq(&out.adapter) < before);
    }

    #[test]
    fn missing_snapshots_are_a_config_error() {
        let (setup, stream) = quad_setup();
        let base = setup.base_weights(0).unwrap();
        let model = Model::from_base(setup.model.clone(), &base).unwrap();
        let ad = init_for(&setup, &base, 0, 1, TAG_INIT).unwrap();
        let stack = DeltaStack::from_entries(vec![vec![Matrix::zeros(1, 2)]]);
        let sched = Schedule {
            seed: 0,
            task: 2,
            stage: 2,
            epochs: 1,
        };
        let err = stage2_finetune(
            &model,
            &base,
            &stack,
            ad,
            &stream.tasks[1].train,
            &[],
            &Strategy::new(StrategyName::HifgoFull),
            &OptimConfig::default(),
            &sched,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    fn small_stream(tasks: usize, seed: u64) -> TaskStream {
        gen_rotated_gaussians(
            &RotatedGaussians {
                tasks,
                samples_per_task: 200,
                ..RotatedGaussians::default()
            },
            seed,
        )
        .unwrap()
    }

    fn class_setup() -> RunSetup {
        RunSetup::new(
            ModelSpec::linear_softmax(8, 4),
            LoraConfig {
                rank: 2,
                scale: 1.0,
                init_std: 0.02,
            },
        )
    }

    #[test]
    fn single_task_run_has_no_history() {
        let stream = small_stream(1, 1);
        let art = run_continual(
            &class_setup(),
            &stream,
            &Strategy::default(),
            &OptimConfig::default(),
            &SubsetPlan::default(),
            7,
        )
        .unwrap();
        assert_eq!(art.perf.n(), 1);
        assert!(art.perf.get(1, 1).is_some());
        assert!(art.snapshots.is_empty());
        assert_eq!(art.counters[0].sets_total, 0);
    }

    #[test]
    fn reruns_are_byte_identical_and_artifacts_are_complete() {
        let stream = small_stream(3, 2);
        let run = || {
            run_continual(
                &class_setup(),
                &stream,
                &Strategy::new(StrategyName::HifgoFull),
                &OptimConfig::default(),
                &SubsetPlan::default(),
                11,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.deterministic_bytes(), b.deterministic_bytes());
        assert!(a.perf.is_full());
        assert_eq!(a.stack.len(), 3);
        assert_eq!(a.snapshots.len(), 1 + 2);
        for (k, c) in a.counters.iter().enumerate() {
            assert_eq!(c.sets_per_step_min, k);
            assert_eq!(c.sets_per_step_max, k);
            assert_eq!(c.sets_total, k * c.steps);
        }
        let mut csv = Vec::new();
        a.write_trace_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("task,stage,step,ce,orth,norm,total\n"));
        assert_eq!(text.lines().count(), a.trace.len() + 1);
    }

    #[test]
    fn multitask_on_one_task_equals_seq_ft() {
        let stream = small_stream(1, 3);
        let setup = class_setup();
        let optim = OptimConfig::default();
        let seq = run_continual(
            &setup,
            &stream,
            &Strategy::new(StrategyName::SeqFt),
            &optim,
            &SubsetPlan::default(),
            4,
        )
        .unwrap();
        let multi = run_multitask(&setup, &stream, &optim, 4).unwrap();
        assert_eq!(seq.deterministic_bytes(), multi.deterministic_bytes());
    }

    #[test]
    fn multitask_fills_only_the_last_row() {
        let stream = small_stream(2, 3);
        let art = run_multitask(&class_setup(), &stream, &OptimConfig::default(), 4).unwrap();
        assert!(art.perf.get(1, 1).is_none());
        assert!(art.perf.get(2, 1).is_some() && art.perf.get(2, 2).is_some());
    }

    #[test]
    fn layer_shapes_of_setup() {
        let s = class_setup();
        assert_eq!(
            s.base_weights(0).unwrap().shapes(),
            vec![LayerShape::new(4, 8)]
        );
    }
}
