//! Synthetic task streams, CSV ingestion and the per-task subset protocol.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, gaussian_matrix, Matrix, RngStream};
use crate::models::{Batch, LossKind, Targets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based position in the stream.
    pub id: usize,
    pub train: Batch,
    pub eval: Batch,
    /// Population optimum (quadratic tasks only), as a weight row.
    pub optimum: Option<Vec<f64>>,
    /// Population Hessian of the batch-mean loss (quadratic tasks only).
    pub hessian: Option<Matrix>,
}

impl TaskSpec {
    pub fn loss_kind(&self) -> LossKind {
        match self.train.targets {
            Targets::Classes(_) => LossKind::CrossEntropy,
            Targets::Regression(_) => LossKind::Mse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskSpec>, seed: u64) -> Result<Self> {
        for (i, t) in tasks.iter().enumerate() {
            if t.id != i + 1 {
                return Err(Error::Config(format!(
                    "task ids must run 1..N in order; position {} has id {}",
                    i + 1,
                    t.id
                )));
            }
        }
        Ok(Self { tasks, seed })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// First `n` tasks.
    pub fn truncated(&self, n: usize) -> TaskStream {
        TaskStream {
            tasks: self.tasks[..n.min(self.tasks.len())].to_vec(),
            seed: self.seed,
        }
    }
}

/// Parameters of the rotated-ring classification family.
///
/// Task 1 places class `c` at angle `2πc/C` on a ring of the given radius.
/// Task `i` applies the rotation by `(i-1)·step` that turns the `(x1, x2)`
/// plane in place and, when `dim >= 6`, also turns `x3 → x5` and `x4 → x6`.
/// With `dim >= 6` the base ring is split between the `(x1, x2)` plane
/// (weight `shared_weight`) and the `(x3, x4)` plane, so consecutive tasks
/// disagree on the shared plane but remain jointly separable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotatedGaussians {
    pub tasks: usize,
    pub classes: usize,
    pub dim: usize,
    pub rotation_step: f64,
    pub samples_per_task: usize,
    pub noise_std: f64,
    pub radius: f64,
    pub shared_weight: f64,
}

impl Default for RotatedGaussians {
    fn default() -> Self {
        Self {
            tasks: 3,
            classes: 4,
            dim: 8,
            rotation_step: PI / 3.0,
            samples_per_task: 2000,
            noise_std: 1.0,
            radius: 2.0,
            shared_weight: 0.8,
        }
    }
}

impl RotatedGaussians {
    fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::Config(
                "rotated-gaussians needs at least one task".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config("rotated-gaussians needs classes >= 2".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("rotated-gaussians needs dim >= 2".into()));
        }
        if self.samples_per_task < 5 {
            return Err(Error::Config(
                "rotated-gaussians needs at least 5 samples per task for an 80/20 split".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !self.rotation_step.is_finite() || !(self.radius > 0.0) {
            return Err(Error::Config(
                "rotated-gaussians needs noise_std >= 0, radius > 0 and a finite step".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_weight) {
            return Err(Error::Config("shared_weight must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Class means of task `task` (1-based), one row per class.
    pub fn class_means(&self, task: usize) -> Matrix {
        let phi = (task as f64 - 1.0) * self.rotation_step;
        let (sp, cp) = phi.sin_cos();
        let split = self.dim >= 6;
        let shared = if split { self.shared_weight } else { 1.0 };
        let private = (1.0 - shared * shared).max(0.0).sqrt();
        let mut means = Matrix::zeros(self.classes, self.dim);
        for c in 0..self.classes {
            let theta = 2.0 * PI * c as f64 / self.classes as f64;
            let (s, co) = theta.sin_cos();
            let base = [shared * co, shared * s];
            means.set(c, 0, self.radius * (cp * base[0] - sp * base[1]));
            means.set(c, 1, self.radius * (sp * base[0] + cp * base[1]));
            if split {
                let p = [private * co, private * s];
                means.set(c, 2, self.radius * cp * p[0]);
                means.set(c, 3, self.radius * cp * p[1]);
                means.set(c, 4, self.radius * sp * p[0]);
                means.set(c, 5, self.radius * sp * p[1]);
            }
        }
        means
    }
}

/// Rotated-ring classification stream; deterministic per `seed`.
pub fn gen_rotated_gaussians(params: &RotatedGaussians, seed: u64) -> Result<TaskStream> {
    params.validate()?;
    let root = RngStream::new(seed, 0x5245_4741);
    let n = params.samples_per_task;
    let n_train = (n * 4) / 5;
    let mut tasks = Vec::with_capacity(params.tasks);
    for t in 1..=params.tasks {
        let mut rng = root.derive(t as u64);
        let means = params.class_means(t);
        let mut labels: Vec<usize> = (0..n).map(|k| k % params.classes).collect();
        rng.shuffle(&mut labels);
        let mut x = gaussian_matrix(&mut rng, n, params.dim, params.noise_std);
        for (row, &label) in labels.iter().enumerate() {
            for col in 0..params.dim {
                let v = x.get(row, col) + means.get(label, col);
                x.set(row, col, v);
            }
        }
        let all = Batch::classes(x, labels)?;
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let (train_idx, eval_idx) = order.split_at(n_train);
        tasks.push(TaskSpec {
            id: t,
            train: all.select(train_idx),
            eval: all.select(eval_idx),
            optimum: None,
            hessian: None,
        });
    }
    TaskStream::new(tasks, seed)
}

/// Parameters of a two-task linear-regression pair with known optima and
/// Hessians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticPair {
    pub theta_a: Vec<f64>,
    pub theta_b: Vec<f64>,
    pub hessian_a: Vec<Vec<f64>>,
    pub hessian_b: Vec<Vec<f64>>,
    pub samples: usize,
    #[serde(default)]
    pub noise_std: f64,
}

impl QuadraticPair {
    /// Isotropic 2-D pair with optima `(1, 0)` and `(0, 1)`.
    pub fn toy() -> Self {
        Self {
            theta_a: vec![1.0, 0.0],
            theta_b: vec![0.0, 1.0],
            hessian_a: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            hessian_b: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            samples: 400,
            noise_std: 0.0,
        }
    }

    /// Random pair with eigenvalues in `[0.2, 2]` and optima `~ N(0, 1)`.
    pub fn random(dim: usize, samples: usize, noise_std: f64, rng: &mut RngStream) -> Self {
        let spd = |rng: &mut RngStream| -> Vec<Vec<f64>> {
            let q = random_orthogonal(dim, rng);
            let eig: Vec<f64> = (0..dim).map(|_| 0.2 + 1.8 * rng.uniform()).collect();
            let mut h = vec![vec![0.0; dim]; dim];
            for (r, row) in h.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = (0..dim).map(|k| q.get(r, k) * eig[k] * q.get(c, k)).sum();
                }
            }
            for r in 0..dim {
                for c in 0..r {
                    let avg = 0.5 * (h[r][c] + h[c][r]);
                    h[r][c] = avg;
                    h[c][r] = avg;
                }
            }
            h
        };
        let theta_a = (0..dim).map(|_| rng.normal()).collect();
        let theta_b = (0..dim).map(|_| rng.normal()).collect();
        let hessian_a = spd(rng);
        let hessian_b = spd(rng);
        Self {
            theta_a,
            theta_b,
            hessian_a,
            hessian_b,
            samples,
            noise_std,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_a.len()
    }
}

fn random_orthogonal(dim: usize, rng: &mut RngStream) -> Matrix {
    // Gram-Schmidt on a Gaussian matrix, column by column.
    let g = gaussian_matrix(rng, dim, dim, 1.0);
    let mut q = Matrix::zeros(dim, dim);
    for c in 0..dim {
        let mut v: Vec<f64> = (0..dim).map(|r| g.get(r, c)).collect();
        for p in 0..c {
            let dot: f64 = (0..dim).map(|r| v[r] * q.get(r, p)).sum();
            for (r, vr) in v.iter_mut().enumerate() {
                *vr -= dot * q.get(r, p);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (r, vr) in v.iter().enumerate() {
            q.set(r, c, vr / norm);
        }
    }
    q
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{what} must be square")));
    }
    Matrix::from_vec(n, n, rows.concat())
}

fn regression_task(
    id: usize,
    theta: &[f64],
    hessian: &Matrix,
    n_train: usize,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<TaskSpec> {
    let chol = cholesky(hessian)?;
    let dim = theta.len();
    let draw = |n: usize, rng: &mut RngStream| -> Result<Batch> {
        let z = gaussian_matrix(rng, n, dim, 1.0);
        let x = crate::linalg::matmul_nt(&z, &chol)?;
        let mut y = Matrix::zeros(n, 1);
        for r in 0..n {
            let clean: f64 = x.row(r).iter().zip(theta).map(|(a, b)| a * b).sum();
            y.set(r, 0, clean + noise_std * rng.normal());
        }
        Batch::regression(x, y)
    };
    let train = draw(n_train, rng)?;
    let eval = draw((n_train / 4).max(1), rng)?;
    Ok(TaskSpec {
        id,
        train,
        eval,
        optimum: Some(theta.to_vec()),
        hessian: Some(hessian.clone()),
    })
}

/// Two regression tasks whose inputs have covariance equal to the given
/// Hessians, so `(1/n)·XᵀX → H`. `samples` is the training-set size; the
/// eval set is a further independent draw of a quarter of that size.
pub fn gen_quadratic_pair(pair: &QuadraticPair, seed: u64) -> Result<TaskStream> {
    let dim = pair.dim();
    if dim == 0 || pair.theta_b.len() != dim {
        return Err(Error::Config(
            "theta_a and theta_b must share a positive length".into(),
        ));
    }
    if pair.samples == 0 {
        return Err(Error::Config("quadratic pair needs samples > 0".into()));
    }
    if !(pair.noise_std >= 0.0) {
        return Err(Error::Config("noise_std must be >= 0".into()));
    }
    let ha = rows_to_matrix(&pair.hessian_a, "hessian_a")?;
    let hb = rows_to_matrix(&pair.hessian_b, "hessian_b")?;
    if ha.rows() != dim || hb.rows() != dim {
        return Err(Error::Config("hessian size must match theta length".into()));
    }
    let root = RngStream::new(seed, 0x5155_4144);
    let a = regression_task(
        1,
        &pair.theta_a,
        &ha,
        pair.samples,
        pair.noise_std,
        &mut root.derive(1),
    )?;
    let b = regression_task(
        2,
        &pair.theta_b,
        &hb,
        pair.samples,
        pair.noise_std,
        &mut root.derive(2),
    )?;
    TaskStream::new(vec![a, b], seed)
}

/// Reads a labelled CSV: header row, one integer label column, every other
/// column a numeric feature in order of appearance. Row numbers in errors
/// count data rows from 1.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Batch> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(e, path))?;
    let headers = reader.headers().map_err(|e| csv_error(e, path))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| {
            Error::Input(format!(
                "column `{label_column}` not found in {}",
                path.display()
            ))
        })?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != label_idx).collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| csv_error(e, path))?;
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: format!("`{cell}` is not finite"),
                });
            }
            data.push(v);
        }
        let cell = record.get(label_idx).unwrap_or("").trim();
        let label: usize = cell.parse().map_err(|_| Error::Parse {
            row,
            column: label_column.to_string(),
            message: format!("`{cell}` is not a non-negative integer label"),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Input(format!("{} has no data rows", path.display())));
    }
    let inputs = Matrix::from_vec(labels.len(), feature_cols.len(), data)?;
    Batch::classes(inputs, labels)
}

fn csv_error(e: csv::Error, path: &Path) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Input(format!("{}: {e}", path.display()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetSize {
    Fraction(f64),
    Count(usize),
}

/// How the stage-2 subset is drawn. The stage-1 set is always the full
/// training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub d2: SubsetSize,
    pub seed: u64,
}

impl Default for SubsetPlan {
    fn default() -> Self {
        Self {
            d2: SubsetSize::Fraction(0.1),
            seed: 0,
        }
    }
}

impl SubsetPlan {
    pub fn validate(&self) -> Result<()> {
        match self.d2 {
            SubsetSize::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::Config(format!(
                "stage-2 fraction must lie in (0, 1], got {f}"
            ))),
            SubsetSize::Count(0) => Err(Error::Config("stage-2 subset size is 0".into())),
            _ => Ok(()),
        }
    }

    pub fn size_for(&self, n: usize) -> Result<usize> {
        self.validate()?;
        let k = match self.d2 {
            SubsetSize::Fraction(f) => (f * n as f64 - 1e-9).ceil().max(0.0) as usize,
            SubsetSize::Count(c) => c,
        };
        let k = k.min(n);
        if k == 0 {
            return Err(Error::Config("stage-2 subset size is 0".into()));
        }
        Ok(k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subsets {
    pub d1: Batch,
    pub d2: Batch,
    /// Sorted training-set indices of `d2`.
    pub d2_indices: Vec<usize>,
}

/// `d1` is the full training set; `d2` a seeded uniform sample without
/// replacement, kept in ascending index order.
pub fn select_subsets(task: &TaskSpec, plan: &SubsetPlan) -> Result<Subsets> {
    let n = task.train.len();
    let k = plan.size_for(n)?;
    let mut rng = RngStream::new(plan.seed, 0x5355_4253).derive(task.id as u64);
    let mut idx = rng.sample_indices(n, k);
    idx.sort_unstable();
    Ok(Subsets {
        d1: task.train.clone(),
        d2: task.train.select(&idx),
        d2_indices: idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul_tn, max_rel_error};
    use std::io::Write;

    fn small_params() -> RotatedGaussians {
        RotatedGaussians {
            tasks: 3,
            classes: 4,
            dim: 8,
            samples_per_task: 200,
            ..Default::default()
        }
    }

    #[test]
    fn rotated_stream_is_reproducible() {
        let p = small_params();
        let a = gen_rotated_gaussians(&p, 9).unwrap();
        let b = gen_rotated_gaussians(&p, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tasks[0].train.len(), 160);
        assert_eq!(a.tasks[0].eval.len(), 40);
        assert_ne!(a, gen_rotated_gaussians(&p, 10).unwrap());
    }

    #[test]
    fn zero_step_gives_identical_distributions() {
        let p = RotatedGaussians {
            rotation_step: 0.0,
            ..small_params()
        };
        for t in 2..=3 {
            assert_eq!(p.class_means(t), p.class_means(1));
        }
    }

    #[test]
    fn quarter_turn_in_two_dims() {
        let p = RotatedGaussians {
            classes: 2,
            dim: 2,
            rotation_step: PI / 2.0,
            radius: 1.0,
            ..small_params()
        };
        let m1 = p.class_means(1);
        let m2 = p.class_means(2);
        for c in 0..2 {
            // (x, y) rotated by 90° is (-y, x).
            assert!((m2.get(c, 0) + m1.get(c, 1)).abs() < 1e-12);
            assert!((m2.get(c, 1) - m1.get(c, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_ring_radius() {
        let p = small_params();
        for t in 1..=3 {
            let m = p.class_means(t);
            for c in 0..p.classes {
                let r: f64 = m.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((r - p.radius).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_rotated_params() {
        for p in [
            RotatedGaussians {
                dim: 1,
                ..small_params()
            },
            RotatedGaussians {
                classes: 1,
                ..small_params()
            },
            RotatedGaussians {
                tasks: 0,
                ..small_params()
            },
        ] {
            assert!(matches!(
                gen_rotated_gaussians(&p, 0),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn quadratic_pair_empirical_hessian_concentrates() {
        let mut rng = RngStream::new(3, 0);
        let mut pair = QuadraticPair::random(3, 10_000, 0.1, &mut rng);
        pair.samples = 10_000;
        let stream = gen_quadratic_pair(&pair, 4).unwrap();
        for t in &stream.tasks {
            let x = &t.train.inputs;
            let emp = matmul_tn(x, x).unwrap().scale(1.0 / x.rows() as f64);
            let h = t.hessian.as_ref().unwrap();
            let rel = emp.sub(h).unwrap().frobenius_norm() / h.frobenius_norm();
            assert!(rel < 0.1, "relative error {rel}");
        }
    }

    #[test]
    fn quadratic_pair_rejects_non_spd() {
        let mut pair = QuadraticPair::toy();
        pair.hessian_b = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            gen_quadratic_pair(&pair, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn quadratic_optimum_has_small_empirical_gradient() {
        let mut rng = RngStream::new(8, 0);
        for seed in 0..5 {
            let pair = QuadraticPair::random(3, 2000, 0.3, &mut rng);
            let stream = gen_quadratic_pair(&pair, seed).unwrap();
            let model =
                crate::models::Model::unbiased(crate::models::ModelSpec::linear_regression(3, 1))
                    .unwrap();
            for t in &stream.tasks {
                let w = Matrix::from_vec(1, 3, t.optimum.clone().unwrap()).unwrap();
                let g = model.grad_wrt_merged(&[w], &t.train).unwrap();
                let bound = 3.0 * 0.3 * (3.0f64 / 2000.0).sqrt();
                assert!(
                    g.grads[0].frobenius_norm() <= bound,
                    "{} > {bound}",
                    g.grads[0].frobenius_norm()
                );
            }
        }
    }

    #[test]
    fn toy_pair_geometry() {
        let stream = gen_quadratic_pair(&QuadraticPair::toy(), 1).unwrap();
        assert_eq!(stream.tasks[0].optimum.as_deref(), Some(&[1.0, 0.0][..]));
        assert_eq!(stream.tasks[1].optimum.as_deref(), Some(&[0.0, 1.0][..]));
        let h = stream.tasks[0].hessian.as_ref().unwrap();
        assert!(max_rel_error(h, &Matrix::identity(2), 1e-12).unwrap() == 0.0);
    }

    fn write_fixture(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_fixture_loads() {
        let f = write_fixture("x1,label,x2\n0.5,1,2\n1.5,0,-1\n2,1,0.25\n");
        let b = load_csv(f.path(), "label").unwrap();
        assert_eq!(b.inputs.shape(), (3, 2));
        assert_eq!(b.inputs.row(0), &[0.5, 2.0]);
        assert_eq!(b.targets, Targets::Classes(vec![1, 0, 1]));
    }

    #[test]
    fn csv_errors() {
        let f = write_fixture("x1,x2,label\n");
        assert!(matches!(load_csv(f.path(), "label"), Err(Error::Input(_))));

        let f = write_fixture("x1,x2,label\n1,2,0\n1,oops,1\n");
        match load_csv(f.path(), "label") {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x2");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let f = write_fixture("x1,x2,y\n1,2,0\n");
        let err = load_csv(f.path(), "label").unwrap_err();
        assert!(err.to_string().contains("label"));
    }

    #[test]
    fn subset_sizes_and_determinism() {
        let stream = gen_rotated_gaussians(
            &RotatedGaussians {
                samples_per_task: 125,
                ..small_params()
            },
            2,
        )
        .unwrap();
        let task = &stream.tasks[0];
        assert_eq!(task.train.len(), 100);

        let plan = SubsetPlan {
            d2: SubsetSize::Fraction(0.1),
            seed: 5,
        };
        let s = select_subsets(task, &plan).unwrap();
        assert_eq!(s.d2.len(), 10);
        assert_eq!(s.d1, task.train);
        assert_eq!(
            select_subsets(task, &plan).unwrap().d2_indices,
            s.d2_indices
        );

        let all = select_subsets(
            task,
            &SubsetPlan {
                d2: SubsetSize::Fraction(1.0),
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(all.d2, all.d1);

        assert!(select_subsets(
            task,
            &SubsetPlan {
                d2: SubsetSize::Count(0),
                seed: 0
            }
        )
        .is_err());
        assert!(select_subsets(
            task,
            &SubsetPlan {
                d2: SubsetSize::Fraction(0.0),
                seed: 0
            }
        )
        .is_err());
        let fixed = select_subsets(
            task,
            &SubsetPlan {
                d2: SubsetSize::Count(7),
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(fixed.d2.len(), 7);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn d2_is_subset_of_d1(seed in any::<u64>(), frac in 0.01f64..=1.0) {
                let stream = gen_rotated_gaussians(&RotatedGaussians { tasks: 1, samples_per_task: 60, ..small_params() }, 1).unwrap();
                let s = select_subsets(&stream.tasks[0], &SubsetPlan { d2: SubsetSize::Fraction(frac), seed }).unwrap();
                prop_assert!(!s.d2_indices.is_empty());
                prop_assert!(s.d2_indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(s.d2_indices.iter().all(|&i| i < s.d1.len()));
                prop_assert_eq!(s.d2.clone(), s.d1.select(&s.d2_indices));
            }
        }
    }
}
