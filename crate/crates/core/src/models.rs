//! Small differentiable predictors with analytic gradients.
//!
//! Every loss is a batch mean so regularization weights do not depend on
//! the batch size. Weight matrices are stored output-by-input; a layer maps
//! a row of inputs `x` to `W·x (+ b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, matmul, matmul_nt, matmul_tn, Matrix};
use crate::lora::{merge, BaseWeights, DeltaStack, LayerShape, LoraAdapter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    LinearSoftmax,
    Mlp1h,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Class count for classifiers, target width for regression.
    pub output_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            input_dim,
            output_dim,
            hidden_dim: 0,
            activation: Activation::Identity,
        }
    }

    pub fn linear_softmax(input_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::LinearSoftmax,
            input_dim,
            output_dim: classes,
            hidden_dim: 0,
            activation: Activation::Identity,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1h,
            input_dim,
            output_dim: classes,
            hidden_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn loss(&self) -> LossKind {
        match self.kind {
            ModelKind::LinearRegression => LossKind::Mse,
            ModelKind::LinearSoftmax | ModelKind::Mlp1h => LossKind::CrossEntropy,
        }
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LinearSoftmax => {
                vec![LayerShape::new(self.output_dim, self.input_dim)]
            }
            ModelKind::Mlp1h => vec![
                LayerShape::new(self.hidden_dim, self.input_dim),
                LayerShape::new(self.output_dim, self.hidden_dim),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        match self.kind {
            ModelKind::LinearSoftmax if self.output_dim < 2 => {
                Err(Error::Config("classifier needs at least 2 classes".into()))
            }
            ModelKind::Mlp1h if self.hidden_dim == 0 => {
                Err(Error::Config("mlp-1h needs hidden_dim > 0".into()))
            }
            ModelKind::Mlp1h if self.output_dim < 2 => {
                Err(Error::Config("classifier needs at least 2 classes".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Targets {
    Regression(Matrix),
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn regression(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::dim("batch", inputs.shape(), targets.shape()));
        }
        Ok(Self {
            inputs,
            targets: Targets::Regression(targets),
        })
    }

    pub fn classes(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim("batch", inputs.shape(), (labels.len(), 1)));
        }
        Ok(Self {
            inputs,
            targets: Targets::Classes(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.inputs.cols();
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(self.inputs.row(i));
        }
        let inputs = Matrix::from_vec(indices.len(), d, x).expect("row gather");
        let targets = match &self.targets {
            Targets::Classes(l) => Targets::Classes(indices.iter().map(|&i| l[i]).collect()),
            Targets::Regression(y) => {
                let k = y.cols();
                let mut t = Vec::with_capacity(indices.len() * k);
                for &i in indices {
                    t.extend_from_slice(y.row(i));
                }
                Targets::Regression(Matrix::from_vec(indices.len(), k, t).expect("row gather"))
            }
        };
        Batch { inputs, targets }
    }

    /// Row-wise concatenation. All batches must share widths and target kind.
    pub fn concat(batches: &[&Batch]) -> Result<Batch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let d = first.inputs.cols();
        let mut x = Vec::new();
        let mut rows = 0;
        let mut labels = Vec::new();
        let mut y = Vec::new();
        let mut y_cols = 0;
        for b in batches {
            if b.inputs.cols() != d {
                return Err(Error::dim("concat", first.inputs.shape(), b.inputs.shape()));
            }
            x.extend_from_slice(b.inputs.data());
            rows += b.len();
            match (&first.targets, &b.targets) {
                (Targets::Classes(_), Targets::Classes(l)) => labels.extend_from_slice(l),
                (Targets::Regression(_), Targets::Regression(t)) => {
                    y_cols = t.cols();
                    y.extend_from_slice(t.data());
                }
                _ => return Err(Error::Input("mixed target kinds".into())),
            }
        }
        let inputs = Matrix::from_vec(rows, d, x)?;
        match first.targets {
            Targets::Classes(_) => Batch::classes(inputs, labels),
            Targets::Regression(_) => Batch::regression(inputs, Matrix::from_vec(rows, y_cols, y)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorGrad {
    pub b: Matrix,
    pub a: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub loss: f64,
    /// Gradient with respect to each merged layer weight.
    pub grads: Vec<Matrix>,
    pub factor_grads: Option<Vec<FactorGrad>>,
}

/// Chain rule through `ΔW = s·B·A`: `dB = s·G·Aᵀ`, `dA = s·Bᵀ·G`.
pub fn factor_grads(adapter: &LoraAdapter, merged_grads: &[Matrix]) -> Result<Vec<FactorGrad>> {
    if merged_grads.len() != adapter.layers.len() {
        return Err(Error::Config(format!(
            "{} gradients for {} adapter layers",
            merged_grads.len(),
            adapter.layers.len()
        )));
    }
    adapter
        .layers
        .iter()
        .zip(merged_grads)
        .map(|(l, g)| {
            Ok(FactorGrad {
                b: matmul_nt(g, &l.a)?.scale(adapter.scale),
                a: matmul_tn(&l.b, g)?.scale(adapter.scale),
            })
        })
        .collect()
}

/// A model spec bound to its frozen biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    biases: Vec<Option<Vec<f64>>>,
}

struct Forward {
    /// Input to each layer (the batch inputs, then hidden activations).
    layer_inputs: Vec<Matrix>,
    /// Hidden pre-activations (mlp only).
    hidden_pre: Option<Matrix>,
    outputs: Matrix,
}

impl Model {
    pub fn new(spec: ModelSpec, biases: Vec<Option<Vec<f64>>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if biases.len() != shapes.len() {
            return Err(Error::Config(format!(
                "{} bias slots for {} layers",
                biases.len(),
                shapes.len()
            )));
        }
        for (b, s) in biases.iter().zip(&shapes) {
            if let Some(b) = b {
                if b.len() != s.rows {
                    return Err(Error::dim("bias", s.as_tuple(), (b.len(), 1)));
                }
            }
        }
        Ok(Self { spec, biases })
    }

    /// Model without bias terms.
    pub fn unbiased(spec: ModelSpec) -> Result<Self> {
        let n = spec.layer_shapes().len();
        Self::new(spec, vec![None; n])
    }

    pub fn from_base(spec: ModelSpec, base: &BaseWeights) -> Result<Self> {
        let want = spec.layer_shapes();
        let got = base.shapes();
        if want != got {
            return Err(Error::Config(format!(
                "base weights {got:?} do not match model layers {want:?}"
            )));
        }
        Self::new(spec, base.biases.clone())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn loss_kind(&self) -> LossKind {
        self.spec.loss()
    }

    fn check(&self, weights: &[Matrix], batch: &Batch) -> Result<()> {
        let shapes = self.spec.layer_shapes();
        if weights.len() != shapes.len() {
            return Err(Error::Config(format!(
                "{} weight matrices for {} layers",
                weights.len(),
                shapes.len()
            )));
        }
        for (w, s) in weights.iter().zip(&shapes) {
            if w.shape() != s.as_tuple() {
                return Err(Error::dim("weights", w.shape(), s.as_tuple()));
            }
        }
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if batch.inputs.cols() != self.spec.input_dim {
            return Err(Error::dim(
                "batch inputs",
                batch.inputs.shape(),
                (batch.len(), self.spec.input_dim),
            ));
        }
        match (&batch.targets, self.loss_kind()) {
            (Targets::Classes(labels), LossKind::CrossEntropy) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= self.spec.output_dim) {
                    return Err(Error::Input(format!(
                        "class index {bad} out of range for {} classes",
                        self.spec.output_dim
                    )));
                }
            }
            (Targets::Regression(y), LossKind::Mse) => {
                if y.cols() != self.spec.output_dim {
                    return Err(Error::dim(
                        "regression targets",
                        y.shape(),
                        (batch.len(), self.spec.output_dim),
                    ));
                }
            }
            _ => {
                return Err(Error::Input(
                    "target kind does not match the model's loss".into(),
                ))
            }
        }
        Ok(())
    }

    fn affine(&self, x: &Matrix, w: &Matrix, layer: usize) -> Result<Matrix> {
        let mut out = matmul_nt(x, w)?;
        if let Some(b) = &self.biases[layer] {
            let cols = out.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b[i % cols];
            }
        }
        Ok(out)
    }

    fn forward(&self, weights: &[Matrix], x: &Matrix) -> Result<Forward> {
        match self.spec.kind {
            ModelKind::LinearRegression | ModelKind::LinearSoftmax => Ok(Forward {
                layer_inputs: vec![x.clone()],
                hidden_pre: None,
                outputs: self.affine(x, &weights[0], 0)?,
            }),
            ModelKind::Mlp1h => {
                let pre = self.affine(x, &weights[0], 0)?;
                let hidden = match self.spec.activation {
                    Activation::Identity => pre.clone(),
                    Activation::Tanh => pre.map(f64::tanh),
                };
                let outputs = self.affine(&hidden, &weights[1], 1)?;
                Ok(Forward {
                    layer_inputs: vec![x.clone(), hidden],
                    hidden_pre: Some(pre),
                    outputs,
                })
            }
        }
    }

    /// Raw model outputs (logits or regression predictions), one row per
    /// sample.
    pub fn predict(&self, weights: &[Matrix], inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(weights, inputs)?.outputs)
    }

    /// Batch-mean loss and its gradient with respect to the outputs.
    fn loss_and_output_grad(&self, outputs: &Matrix, batch: &Batch) -> Result<(f64, Matrix)> {
        let n = batch.len() as f64;
        match &batch.targets {
            Targets::Regression(y) => {
                let resid = outputs.sub(y)?;
                let loss = 0.5 * frobenius_inner(&resid, &resid)? / n;
                Ok((loss, resid.scale(1.0 / n)))
            }
            Targets::Classes(labels) => {
                if !outputs.is_finite() {
                    return Err(Error::Numeric("non-finite logits".into()));
                }
                let c = outputs.cols();
                let mut grad = Matrix::zeros(outputs.rows(), c);
                let mut total = 0.0;
                for (i, &label) in labels.iter().enumerate() {
                    let row = outputs.row(i);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let lse = max + sum_exp.ln();
                    total += lse - row[label];
                    let g = &mut grad.data_mut()[i * c..(i + 1) * c];
                    for (gj, v) in g.iter_mut().zip(row) {
                        *gj = (v - lse).exp() / n;
                    }
                    g[label] -= 1.0 / n;
                }
                Ok((total / n, grad))
            }
        }
    }

    pub fn forward_loss(&self, weights: &[Matrix], batch: &Batch) -> Result<f64> {
        self.check(weights, batch)?;
        let fwd = self.forward(weights, &batch.inputs)?;
        let (loss, _) = self.loss_and_output_grad(&fwd.outputs, batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        Ok(loss)
    }

    pub fn grad_wrt_merged(&self, weights: &[Matrix], batch: &Batch) -> Result<GradReport> {
        self.check(weights, batch)?;
        let fwd = self.forward(weights, &batch.inputs)?;
        let (loss, d_out) = self.loss_and_output_grad(&fwd.outputs, batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let grads = match self.spec.kind {
            ModelKind::LinearRegression | ModelKind::LinearSoftmax => {
                vec![matmul_tn(&d_out, &fwd.layer_inputs[0])?]
            }
            ModelKind::Mlp1h => {
                let g2 = matmul_tn(&d_out, &fwd.layer_inputs[1])?;
                let mut d_hidden = matmul(&d_out, &weights[1])?;
                if self.spec.activation == Activation::Tanh {
                    let h = &fwd.layer_inputs[1];
                    for (d, hv) in d_hidden.data_mut().iter_mut().zip(h.data()) {
                        *d *= 1.0 - hv * hv;
                    }
                }
                debug_assert!(fwd.hidden_pre.is_some());
                let g1 = matmul_tn(&d_hidden, &fwd.layer_inputs[0])?;
                vec![g1, g2]
            }
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(GradReport {
            loss,
            grads,
            factor_grads: None,
        })
    }

    pub fn grad_wrt_factors(
        &self,
        base: &BaseWeights,
        stack: &DeltaStack,
        adapter: &LoraAdapter,
        batch: &Batch,
    ) -> Result<GradReport> {
        let merged = merge(base, stack, Some(adapter))?;
        let mut report = self.grad_wrt_merged(&merged, batch)?;
        report.factor_grads = Some(factor_grads(adapter, &report.grads)?);
        Ok(report)
    }

    /// Hessian-vector product with respect to merged weights. Exact for
    /// linear regression; central difference of gradients otherwise.
    pub fn hessian_vector(
        &self,
        weights: &[Matrix],
        batch: &Batch,
        v: &[Matrix],
    ) -> Result<Vec<Matrix>> {
        self.check(weights, batch)?;
        if v.len() != weights.len() {
            return Err(Error::Config("direction has the wrong layer count".into()));
        }
        for (vi, w) in v.iter().zip(weights) {
            if vi.shape() != w.shape() {
                return Err(Error::dim("hessian_vector", vi.shape(), w.shape()));
            }
        }
        let norm = v
            .iter()
            .map(|m| frobenius_inner(m, m).unwrap())
            .sum::<f64>()
            .sqrt();
        if !(norm > 1e-10) {
            return Err(Error::Input(format!(
                "hessian_vector direction norm {norm:e} is too small"
            )));
        }
        if self.spec.kind == ModelKind::LinearRegression {
            let n = batch.len() as f64;
            let xv = matmul_nt(&batch.inputs, &v[0])?;
            return Ok(vec![matmul_tn(&xv, &batch.inputs)?.scale(1.0 / n)]);
        }
        let h = 1e-4 / norm;
        let shifted = |sign: f64| -> Result<Vec<Matrix>> {
            weights
                .iter()
                .zip(v)
                .map(|(w, d)| {
                    let mut m = w.clone();
                    m.add_scaled_assign(sign * h, d)?;
                    Ok(m)
                })
                .collect()
        };
        let gp = self.grad_wrt_merged(&shifted(1.0)?, batch)?.grads;
        let gm = self.grad_wrt_merged(&shifted(-1.0)?, batch)?.grads;
        let out: Vec<Matrix> = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| a.sub(b).map(|d| d.scale(1.0 / (2.0 * h))))
            .collect::<Result<_>>()?;
        if out.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric("non-finite hessian-vector product".into()));
        }
        Ok(out)
    }

    /// Accuracy in percent for classifiers, `100·exp(-mean loss)` for
    /// regression.
    pub fn evaluate(&self, weights: &[Matrix], dataset: &Batch) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Input("cannot evaluate on an empty dataset".into()));
        }
        self.check(weights, dataset)?;
        match &dataset.targets {
            Targets::Classes(labels) => {
                let out = self.predict(weights, &dataset.inputs)?;
                let correct = labels
                    .iter()
                    .enumerate()
                    .filter(|(i, &l)| argmax(out.row(*i)) == l)
                    .count();
                Ok(100.0 * correct as f64 / labels.len() as f64)
            }
            Targets::Regression(_) => Ok(100.0 * (-self.forward_loss(weights, dataset)?).exp()),
        }
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
