//! Dense row-major matrices, seeded random streams and finite-difference
//! utilities.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.get(r, c))?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let k = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * k);
        for r in rows {
            assert_eq!(r.as_ref().len(), k, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: n,
            cols: k,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += alpha * other`
    pub fn add_scaled_assign(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                let (a, b) = (self.get(r, c), self.get(c, r));
                if (a - b).abs() > tol * (1.0 + a.abs().max(b.abs())) {
                    return false;
                }
            }
        }
        true
    }

    /// Matrix-vector product for a column given as a slice.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim("mul_vec", self.shape(), (v.len(), 1)));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Sum over entries of `a[p][q] * b[p][q]`, accumulated in row-major order.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same(b, "frobenius_inner")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(k, m);
    for s in 0..n {
        let a_row = &a.data[s * k..(s + 1) * k];
        let b_row = &b.data[s * m..(s + 1) * m];
        for (p, &ap) in a_row.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let out_row = &mut out.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += ap * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b.data[j * k..(j + 1) * k];
            out.data[i * m + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(Error::dim("cholesky", a.shape(), a.shape()));
    }
    if !a.is_symmetric(1e-10) {
        return Err(Error::Config("matrix is not symmetric".into()));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for p in 0..j {
            d -= l.get(j, p) * l.get(j, p);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Config(format!(
                "matrix is not positive definite (pivot {j} = {d})"
            )));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::dim("solve", a.shape(), (b.len(), 1)));
    }
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col].abs() <= 1e-14 * scale {
            return Err(Error::Numeric(format!("singular matrix at column {col}")));
        }
        if pivot != col {
            for c in 0..n {
                m.swap(col * n + c, pivot * n + c);
            }
            x.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for r in (col + 1)..n {
            let f = m[r * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            x[r] -= f * x[col];
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for c in (r + 1)..n {
            s -= m[r * n + c] * x[c];
        }
        x[r] = s / m[r * n + r];
    }
    Ok(x)
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<F>(f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference eps must be > 0, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows, x.cols);
    for idx in 0..x.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + eps;
        let fp = f(&probe)?;
        probe.data[idx] = orig - eps;
        let fm = f(&probe)?;
        probe.data[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while perturbing entry ({}, {})",
                idx / x.cols,
                idx % x.cols
            )));
        }
        grad.data[idx] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Splittable deterministic random stream. Identical `(seed, stream)` pairs
/// replay identical draws; distinct stream ids select independent ChaCha
/// streams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Child stream keyed by `tag`; independent of how far `self` has
    /// been advanced.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream ^ splitmix64(tag)))
    }

    /// Child stream keyed by a path of tags.
    pub fn derive_path(&self, tags: &[u64]) -> RngStream {
        tags.iter().fold(self.clone(), |s, &t| s.derive(t))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec()
    }
}

/// I.i.d. `N(0, std²)` entries drawn row-major from `rng`.
pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    if std == 0.0 {
        return m;
    }
    for v in m.data.iter_mut() {
        *v = std * rng.normal();
    }
    m
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`, elementwise max over
/// matrices.
pub fn max_rel_error(a: &Matrix, b: &Matrix, floor: f64) -> Result<f64> {
    a.check_same(b, "max_rel_error")?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_inner(a: &Matrix, b: &Matrix) -> f64 {
        let mut s = 0.0;
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                s += a.get(r, c) * b.get(r, c);
            }
        }
        s
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn inner_trivial_values() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(frobenius_inner(&a, &b).unwrap(), 0.0);
        let c = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(frobenius_inner(&c, &c).unwrap(), 30.0);
    }

    #[test]
    fn inner_matches_reference_loop() {
        let mut rng = RngStream::new(7, 0);
        let a = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let b = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let got = frobenius_inner(&a, &b).unwrap();
        assert!((got - naive_inner(&a, &b)).abs() <= 1e-14);
    }

    #[test]
    fn inner_shape_mismatch_names_both_shapes() {
        let err = frobenius_inner(&Matrix::zeros(2, 3), &Matrix::zeros(3, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(3, 2)"), "{msg}");
    }

    #[test]
    fn matmul_examples() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let b = Matrix::from_rows(&[[1.0], [2.0]]);
        let a = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(
            matmul(&b, &a).unwrap(),
            Matrix::from_rows(&[[3.0, 4.0], [6.0, 8.0]])
        );
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(11, 3);
        let a = gaussian_matrix(&mut rng, 4, 3, 1.0);
        let b = gaussian_matrix(&mut rng, 3, 2, 1.0);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        assert!(max_rel_error(&got, &want, 1e-12).unwrap() < 1e-13);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(max_rel_error(&tn, &want, 1e-12).unwrap() < 1e-13);
        assert!(max_rel_error(&nt, &want, 1e-12).unwrap() < 1e-13);
    }

    #[test]
    fn finite_diff_exact_cases() {
        let mut rng = RngStream::new(1, 1);
        let x = gaussian_matrix(&mut rng, 3, 2, 1.0);
        let g = finite_diff_grad(|m| Ok(0.5 * frobenius_inner(m, m)?), &x, DEFAULT_FD_EPS).unwrap();
        assert!(max_rel_error(&g, &x, 1e-8).unwrap() < 1e-8);
        let c = gaussian_matrix(&mut rng, 3, 2, 1.0);
        let g = finite_diff_grad(|m| frobenius_inner(&c, m), &x, DEFAULT_FD_EPS).unwrap();
        assert!(max_rel_error(&g, &c, 1e-8).unwrap() < 1e-8);
    }

    #[test]
    fn finite_diff_reports_offending_entry() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let err = finite_diff_grad(
            |m| Ok(if m.get(1, 0) > 3.0 { f64::NAN } else { 0.0 }),
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("(1, 0)"), "{err}");
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn gaussian_moments_and_determinism() {
        let z = gaussian_matrix(&mut RngStream::new(42, 0), 3, 3, 0.0);
        assert!(z.data().iter().all(|&v| v == 0.0));

        let a = gaussian_matrix(&mut RngStream::new(42, 0), 100, 100, 1.0);
        let b = gaussian_matrix(&mut RngStream::new(42, 0), 100, 100, 1.0);
        assert_eq!(a, b);
        let n = a.len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn streams_are_independent() {
        let a = gaussian_matrix(&mut RngStream::new(5, 0), 1, 64, 1.0);
        let b = gaussian_matrix(&mut RngStream::new(5, 1), 1, 64, 1.0);
        assert_ne!(a, b);
        let parent = RngStream::new(5, 0);
        let mut advanced = parent.clone();
        advanced.next_u64();
        assert_eq!(
            gaussian_matrix(&mut parent.derive(3), 2, 2, 1.0),
            gaussian_matrix(&mut advanced.derive(3), 2, 2, 1.0)
        );
    }

    #[test]
    fn cholesky_and_solve() {
        let h = Matrix::from_rows(&[[4.0, 1.0], [1.0, 3.0]]);
        let l = cholesky(&h).unwrap();
        let back = matmul_nt(&l, &l).unwrap();
        assert!(max_rel_error(&back, &h, 1e-12).unwrap() < 1e-14);
        let x = solve(&h, &[1.0, 2.0]).unwrap();
        let hx = h.mul_vec(&x).unwrap();
        assert!((hx[0] - 1.0).abs() < 1e-14 && (hx[1] - 2.0).abs() < 1e-14);
        assert!(cholesky(&Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]])).is_err());
        assert!(solve(&Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]), &[1.0, 1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_is_associative(seed in 0u64..1000) {
                let mut rng = RngStream::new(seed, 9);
                let a = gaussian_matrix(&mut rng, 3, 4, 1.0);
                let b = gaussian_matrix(&mut rng, 4, 2, 1.0);
                let c = gaussian_matrix(&mut rng, 2, 5, 1.0);
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let err = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm();
                prop_assert!(err <= 1e-10);
            }

            #[test]
            fn self_inner_is_squared_norm(seed in 0u64..1000, zero in proptest::bool::ANY) {
                let std = if zero { 0.0 } else { 1.0 };
                let a = gaussian_matrix(&mut RngStream::new(seed, 2), 3, 3, std);
                let ip = frobenius_inner(&a, &a).unwrap();
                prop_assert!(ip >= 0.0);
                prop_assert_eq!(ip == 0.0, zero);
                prop_assert!((ip - a.frobenius_norm().powi(2)).abs() <= 1e-12 * (1.0 + ip));
            }

            #[test]
            fn replay_is_bitwise_identical(seed in any::<u64>(), stream in any::<u64>()) {
                let mut r1 = RngStream::new(seed, stream);
                let mut r2 = RngStream::new(seed, stream);
                let a = gaussian_matrix(&mut r1, 4, 4, 0.3);
                let b = gaussian_matrix(&mut r2, 4, 4, 0.3);
                prop_assert_eq!(
                    a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}
