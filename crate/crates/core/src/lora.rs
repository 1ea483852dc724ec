//! Low-rank adapters, frozen per-task delta stacks and weight merging.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, gaussian_matrix, matmul, Matrix, RngStream};

/// Output-by-input shape of one adapted linear map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn as_tuple(self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Multiplier on `B·A`. 1.0 reproduces the bare product.
    pub scale: f64,
    /// Std of the Gaussian `A` factor at initialization.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            scale: 1.0,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    /// d×r
    pub b: Matrix,
    /// r×k
    pub a: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub layers: Vec<LoraLayer>,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape::new(l.b.rows(), l.a.cols()))
            .collect()
    }

    /// Per-layer `scale · B·A`.
    pub fn effective_delta(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .map(|l| {
                matmul(&l.b, &l.a)
                    .expect("adapter factors are shape-consistent")
                    .scale(self.scale)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.b.is_finite() && l.a.is_finite())
    }

    /// Adapter with the same shapes and every factor entry set to zero.
    pub fn zeros_like(&self) -> LoraAdapter {
        LoraAdapter {
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    b: Matrix::zeros(l.b.rows(), l.b.cols()),
                    a: Matrix::zeros(l.a.rows(), l.a.cols()),
                })
                .collect(),
            rank: self.rank,
            scale: self.scale,
        }
    }
}

/// Vanilla LoRA initialization: `B = 0`, `A ~ N(0, init_std²)`.
pub fn init_adapter(
    shapes: &[LayerShape],
    cfg: &LoraConfig,
    rng: &mut RngStream,
) -> Result<LoraAdapter> {
    if cfg.rank == 0 {
        return Err(Error::Config("lora rank must be at least 1".into()));
    }
    if !(cfg.scale > 0.0) {
        return Err(Error::Config(format!(
            "lora scale must be > 0, got {}",
            cfg.scale
        )));
    }
    if !(cfg.init_std >= 0.0) {
        return Err(Error::Config(format!(
            "lora init_std must be >= 0, got {}",
            cfg.init_std
        )));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        if cfg.rank > s.rows.min(s.cols) {
            return Err(Error::Config(format!(
                "lora rank {} exceeds min dimension of layer {i} ({}x{})",
                cfg.rank, s.rows, s.cols
            )));
        }
        layers.push(LoraLayer {
            b: Matrix::zeros(s.rows, cfg.rank),
            a: gaussian_matrix(rng, cfg.rank, s.cols, cfg.init_std),
        });
    }
    Ok(LoraAdapter {
        layers,
        rank: cfg.rank,
        scale: cfg.scale,
    })
}

pub fn effective_delta(adapter: &LoraAdapter) -> Vec<Matrix> {
    adapter.effective_delta()
}

/// Frozen pre-trained weights. Biases, where present, are never adapted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseWeights {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vec<f64>>>,
}

impl BaseWeights {
    pub fn new(weights: Vec<Matrix>) -> Self {
        let biases = vec![None; weights.len()];
        Self { weights, biases }
    }

    pub fn with_biases(weights: Vec<Matrix>, biases: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if biases.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} bias slots for {} layers",
                biases.len(),
                weights.len()
            )));
        }
        for (w, b) in weights.iter().zip(&biases) {
            if let Some(b) = b {
                if b.len() != w.rows() {
                    return Err(Error::dim("bias", w.shape(), (b.len(), 1)));
                }
            }
        }
        Ok(Self { weights, biases })
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.weights
            .iter()
            .map(|w| LayerShape::new(w.rows(), w.cols()))
            .collect()
    }
}

/// Ordered per-task effective updates, one entry (per-layer matrices) per
/// completed task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaStack {
    entries: Vec<Vec<Matrix>>,
}

impl DeltaStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<Vec<Matrix>>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[Vec<Matrix>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The first `j` entries.
    pub fn prefix(&self, j: usize) -> DeltaStack {
        DeltaStack {
            entries: self.entries[..j.min(self.entries.len())].to_vec(),
        }
    }

    /// Sum of all entries, layer by layer, in task order.
    pub fn total(&self, shapes: &[LayerShape]) -> Result<Vec<Matrix>> {
        let mut out: Vec<Matrix> = shapes
            .iter()
            .map(|s| Matrix::zeros(s.rows, s.cols))
            .collect();
        for entry in &self.entries {
            check_layers(entry, shapes, "delta stack")?;
            for (acc, d) in out.iter_mut().zip(entry) {
                acc.add_assign(d)?;
            }
        }
        Ok(out)
    }
}

fn check_layers(mats: &[Matrix], shapes: &[LayerShape], what: &'static str) -> Result<()> {
    if mats.len() != shapes.len() {
        return Err(Error::Config(format!(
            "{what} has {} layers, model has {}",
            mats.len(),
            shapes.len()
        )));
    }
    for (m, s) in mats.iter().zip(shapes) {
        if m.shape() != s.as_tuple() {
            return Err(Error::dim(what, m.shape(), s.as_tuple()));
        }
    }
    Ok(())
}

/// `W0 + Σ_m ΔW_m + scale·B·A`, accumulated left to right.
pub fn merge(
    base: &BaseWeights,
    stack: &DeltaStack,
    current: Option<&LoraAdapter>,
) -> Result<Vec<Matrix>> {
    let shapes = base.shapes();
    let mut out = base.weights.clone();
    for entry in stack.entries() {
        check_layers(entry, &shapes, "delta stack")?;
        for (w, d) in out.iter_mut().zip(entry) {
            w.add_assign(d)?;
        }
    }
    if let Some(adapter) = current {
        let delta = adapter.effective_delta();
        check_layers(&delta, &shapes, "adapter")?;
        for (w, d) in out.iter_mut().zip(&delta) {
            w.add_assign(d)?;
        }
    }
    Ok(out)
}

/// `Σ_layers ‖scale·B·A‖_F²`.
pub fn adapter_norm_sq(adapter: &LoraAdapter) -> f64 {
    adapter
        .effective_delta()
        .iter()
        .map(|d| frobenius_inner(d, d).expect("same shape"))
        .sum()
}

/// Appends the adapter's effective delta; the input stack is left as is.
pub fn freeze_delta(adapter: &LoraAdapter, stack: &DeltaStack) -> DeltaStack {
    let mut entries = stack.entries.clone();
    entries.push(adapter.effective_delta());
    DeltaStack { entries }
}

/// Writes matrices as `u64 count`, then per matrix `u64 rows, u64 cols`
/// followed by row-major little-endian f64 values.
pub fn write_matrices<W: Write>(w: &mut W, mats: &[Matrix]) -> Result<()> {
    w.write_all(&(mats.len() as u64).to_le_bytes())?;
    for m in mats {
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_matrices<R: Read>(r: &mut R) -> Result<Vec<Matrix>> {
    let count = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Input("matrix header overflows".into()))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(r)?));
        }
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    Ok(out)
}

/// Binary stack layout: `u64 entries`, then each entry as in
/// [`write_matrices`].
pub fn write_stack<W: Write>(w: &mut W, stack: &DeltaStack) -> Result<()> {
    w.write_all(&(stack.len() as u64).to_le_bytes())?;
    for e in stack.entries() {
        write_matrices(w, e)?;
    }
    Ok(())
}

pub fn read_stack<R: Read>(r: &mut R) -> Result<DeltaStack> {
    let n = read_u64(r)? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        entries.push(read_matrices(r)?);
    }
    Ok(DeltaStack { entries })
}

/// Binary adapter layout: `f64 scale`, `u64 rank`, then interleaved
/// `B, A` per layer as in [`write_matrices`].
pub fn write_adapter<W: Write>(w: &mut W, adapter: &LoraAdapter) -> Result<()> {
    w.write_all(&adapter.scale.to_le_bytes())?;
    w.write_all(&(adapter.rank as u64).to_le_bytes())?;
    let mats: Vec<Matrix> = adapter
        .layers
        .iter()
        .flat_map(|l| [l.b.clone(), l.a.clone()])
        .collect();
    write_matrices(w, &mats)
}

pub fn read_adapter<R: Read>(r: &mut R) -> Result<LoraAdapter> {
    let scale = f64::from_bits(read_u64(r)?);
    let rank = read_u64(r)? as usize;
    let mats = read_matrices(r)?;
    if mats.len() % 2 != 0 {
        return Err(Error::Input("adapter blob has an odd factor count".into()));
    }
    let mut layers = Vec::with_capacity(mats.len() / 2);
    let mut it = mats.into_iter();
    while let (Some(b), Some(a)) = (it.next(), it.next()) {
        if b.cols() != rank || a.rows() != rank {
            return Err(Error::dim("adapter blob", b.shape(), a.shape()));
        }
        layers.push(LoraLayer { b, a });
    }
    Ok(LoraAdapter {
        layers,
        rank,
        scale,
    })
}
