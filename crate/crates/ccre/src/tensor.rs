//! Minimal reverse-mode differentiation substrate.
//!
//! Values are 64-bit-float matrices (vectors are 1×n, scalars 1×1) laid
//! out row-major. A [`Tape`] records every operation of one forward pass;
//! [`Tape::backward`] walks the recorded nodes in reverse and accumulates
//! gradients into the [`ParamStore`]. Tapes are single-threaded and cheap
//! to rebuild per sample.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("masked softmax needs at least one enabled entry")]
    EmptyMask,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("masked mean needs at least one valid row")]
    EmptyMeanMask,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/product mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        let cols = v.len();
        Self::new(1, cols, v)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// Standard sinusoidal positional encodings: for channel `k` at position
/// `pos` the argument is `pos / 10000^(2*(k/2)/dim)`, with sine on even
/// and cosine on odd channels.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for k in 0..dim {
            let exponent = (2 * (k / 2)) as f64 / dim as f64;
            let arg = pos as f64 / 10000f64.powf(exponent);
            data[pos * dim + k] = if k % 2 == 0 { arg.sin() } else { arg.cos() };
        }
    }
    Tensor::new(len, dim, data)
}

/// Named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Insertion-ordered set of parameters; the order defines the checkpoint
/// layout and the optimizer walk.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    items: IndexMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.items.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.len()];
        let idx = self.items.len();
        self.items.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                value,
                grad,
            },
        );
        idx
    }

    pub fn index_of(&self, name: &str) -> Result<usize, TensorError> {
        self.items
            .get_index_of(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.items[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.items[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.items.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.items.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.values_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in self.items.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Param(usize),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddConst(TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    AddRowwise(TensorId, TensorId),
    MulRowwise(TensorId, TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    LayerNorm(TensorId, f64),
    SoftmaxRows(TensorId),
    SoftmaxMasked(TensorId, Vec<bool>),
    Embedding(TensorId, Vec<usize>),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceCols(TensorId, usize),
    SliceRows(TensorId, usize),
    MeanMasked(TensorId, Vec<f64>),
    Dropout(TensorId, Vec<f64>),
    GumbelSt(TensorId, Vec<f64>, f64, Vec<bool>),
    MaskedLse(TensorId, Vec<usize>),
    WeightedGather(TensorId, Vec<(usize, f64)>),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Records one forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> TensorId {
        let mut nodes = self.nodes.borrow_mut();
        let grad = vec![0.0; value.len()];
        nodes.push(Node { value, grad, op });
        TensorId(nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = self.nodes.borrow();
        (n[id.0].value.rows, n[id.0].value.cols)
    }

    pub fn grad(&self, id: TensorId) -> Vec<f64> {
        self.nodes.borrow()[id.0].grad.clone()
    }

    /// Introduces constant input data (no gradient tracked).
    pub fn constant(&self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    /// Introduces a parameter leaf bound to a store slot; its gradient is
    /// accumulated into the store by [`Tape::backward`].
    pub fn param(&self, store: &ParamStore, idx: usize) -> TensorId {
        self.push(store.get(idx).value.clone(), Op::Param(idx))
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.rows != tb.rows || ta.cols != tb.cols {
            return Err(TensorError::ShapeMismatch {
                expected: ta.shape_str(),
                got: tb.shape_str(),
            });
        }
        Ok(())
    }

    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape(a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            Tensor::new(
                ta.rows,
                ta.cols,
                ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
            )
        };
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape(a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            Tensor::new(
                ta.rows,
                ta.cols,
                ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
            )
        };
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&self, a: TensorId, s: f64) -> TensorId {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x * s).collect())
        };
        self.push(value, Op::Scale(a, s))
    }

    /// Adds constant data (positional encodings, attention mask biases).
    pub fn add_const(&self, a: TensorId, c: &Tensor) -> Result<TensorId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.rows != c.rows || ta.cols != c.cols {
                return Err(TensorError::ShapeMismatch {
                    expected: ta.shape_str(),
                    got: c.shape_str(),
                });
            }
            Tensor::new(
                ta.rows,
                ta.cols,
                ta.data.iter().zip(&c.data).map(|(x, y)| x + y).collect(),
            )
        };
        Ok(self.push(value, Op::AddConst(a)))
    }

    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.cols != tb.rows {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("{}x? @ {}x?", ta.shape_str(), ta.cols),
                    got: tb.shape_str(),
                });
            }
            matmul_values(ta, tb)
        };
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_rowwise(xw, b)
    }

    pub fn transpose(&self, a: TensorId) -> TensorId {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let mut data = vec![0.0; ta.len()];
            for r in 0..ta.rows {
                for c in 0..ta.cols {
                    data[c * ta.rows + r] = ta.at(r, c);
                }
            }
            Tensor::new(ta.cols, ta.rows, data)
        };
        self.push(value, Op::Transpose(a))
    }

    /// `(r×c) + (1×c)` broadcast over rows.
    pub fn add_rowwise(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if tb.rows != 1 || tb.cols != ta.cols {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("1x{}", ta.cols),
                    got: tb.shape_str(),
                });
            }
            let mut data = ta.data.clone();
            for r in 0..ta.rows {
                for c in 0..ta.cols {
                    data[r * ta.cols + c] += tb.data[c];
                }
            }
            Tensor::new(ta.rows, ta.cols, data)
        };
        Ok(self.push(value, Op::AddRowwise(a, b)))
    }

    /// `(r×c) * (1×c)` broadcast over rows.
    pub fn mul_rowwise(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if tb.rows != 1 || tb.cols != ta.cols {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("1x{}", ta.cols),
                    got: tb.shape_str(),
                });
            }
            let mut data = ta.data.clone();
            for r in 0..ta.rows {
                for c in 0..ta.cols {
                    data[r * ta.cols + c] *= tb.data[c];
                }
            }
            Tensor::new(ta.rows, ta.cols, data)
        };
        Ok(self.push(value, Op::MulRowwise(a, b)))
    }

    pub fn relu(&self, a: TensorId) -> TensorId {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x.max(0.0)).collect())
        };
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: TensorId) -> TensorId {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(
                ta.rows,
                ta.cols,
                ta.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
            )
        };
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: TensorId) -> TensorId {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x.tanh()).collect())
        };
        self.push(value, Op::Tanh(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`; scale and
    /// shift are applied by the caller when learned.
    pub fn layer_norm(&self, a: TensorId) -> TensorId {
        const EPS: f64 = 1e-5;
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let mut data = vec![0.0; ta.len()];
            for r in 0..ta.rows {
                let row = ta.row(r);
                let mean = row.iter().sum::<f64>() / ta.cols as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / ta.cols as f64;
                let inv = 1.0 / (var + EPS).sqrt();
                for c in 0..ta.cols {
                    data[r * ta.cols + c] = (row[c] - mean) * inv;
                }
            }
            Tensor::new(ta.rows, ta.cols, data)
        };
        self.push(value, Op::LayerNorm(a, EPS))
    }

    /// Row-wise softmax over the full width (attention weights after any
    /// additive masking).
    pub fn softmax_rows(&self, a: TensorId) -> TensorId {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let mut data = vec![0.0; ta.len()];
            for r in 0..ta.rows {
                let row = ta.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..ta.cols {
                    let e = (row[c] - max).exp();
                    data[r * ta.cols + c] = e;
                    sum += e;
                }
                for c in 0..ta.cols {
                    data[r * ta.cols + c] /= sum;
                }
            }
            Tensor::new(ta.rows, ta.cols, data)
        };
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Feasibility-restricted softmax over a logit vector: a large
    /// negative surrogate is added to disabled entries before
    /// normalization and the disabled outputs are forced to exact zero.
    pub fn softmax_masked(&self, a: TensorId, mask: &[bool]) -> Result<TensorId, TensorError> {
        if !mask.iter().any(|m| *m) {
            return Err(TensorError::EmptyMask);
        }
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.rows != 1 || ta.cols != mask.len() {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("1x{}", mask.len()),
                    got: ta.shape_str(),
                });
            }
            Tensor::from_vec(masked_softmax_values(&ta.data, mask))
        };
        Ok(self.push(value, Op::SoftmaxMasked(a, mask.to_vec())))
    }

    /// Gathers rows of `table` for each index.
    pub fn embedding(&self, table: TensorId, indices: &[usize]) -> Result<TensorId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            let mut data = Vec::with_capacity(indices.len() * tt.cols);
            for &i in indices {
                if i >= tt.rows {
                    return Err(TensorError::ShapeMismatch {
                        expected: format!("index < {}", tt.rows),
                        got: format!("{i}"),
                    });
                }
                data.extend_from_slice(tt.row(i));
            }
            Tensor::new(indices.len(), tt.cols, data)
        };
        Ok(self.push(value, Op::Embedding(table, indices.to_vec())))
    }

    /// Vertically stacks matrices with equal widths.
    pub fn concat_rows(&self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for id in parts {
                let t = &nodes[id.0].value;
                if t.cols != cols {
                    return Err(TensorError::ShapeMismatch {
                        expected: format!("?x{cols}"),
                        got: t.shape_str(),
                    });
                }
                rows += t.rows;
                data.extend_from_slice(&t.data);
            }
            Tensor::new(rows, cols, data)
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Horizontally concatenates matrices with equal heights.
    pub fn concat_cols(&self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows;
            let total_cols: usize = parts.iter().map(|id| nodes[id.0].value.cols).sum();
            let mut data = vec![0.0; rows * total_cols];
            let mut offset = 0;
            for id in parts {
                let t = &nodes[id.0].value;
                if t.rows != rows {
                    return Err(TensorError::ShapeMismatch {
                        expected: format!("{rows}x?"),
                        got: t.shape_str(),
                    });
                }
                for r in 0..rows {
                    data[r * total_cols + offset..r * total_cols + offset + t.cols]
                        .copy_from_slice(t.row(r));
                }
                offset += t.cols;
            }
            Tensor::new(rows, total_cols, data)
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&self, a: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if start + len > ta.cols {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("cols <= {}", ta.cols),
                    got: format!("{}..{}", start, start + len),
                });
            }
            let mut data = Vec::with_capacity(ta.rows * len);
            for r in 0..ta.rows {
                data.extend_from_slice(&ta.row(r)[start..start + len]);
            }
            Tensor::new(ta.rows, len, data)
        };
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&self, a: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if start + len > ta.rows {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("rows <= {}", ta.rows),
                    got: format!("{}..{}", start, start + len),
                });
            }
            Tensor::new(
                len,
                ta.cols,
                ta.data[start * ta.cols..(start + len) * ta.cols].to_vec(),
            )
        };
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    /// Mean of the rows with a truthy mask entry: `Σ m_t·x_t / Σ m_t`.
    pub fn mean_masked(&self, a: TensorId, mask: &[bool]) -> Result<TensorId, TensorError> {
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(TensorError::EmptyMeanMask);
        }
        let weights: Vec<f64> = mask
            .iter()
            .map(|m| if *m { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.rows != mask.len() {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("{}x?", mask.len()),
                    got: ta.shape_str(),
                });
            }
            let mut out = vec![0.0; ta.cols];
            for r in 0..ta.rows {
                if weights[r] != 0.0 {
                    for c in 0..ta.cols {
                        out[c] += weights[r] * ta.at(r, c);
                    }
                }
            }
            Tensor::from_vec(out)
        };
        Ok(self.push(value, Op::MeanMasked(a, weights)))
    }

    /// Inverted-scaling dropout with a caller-supplied deterministic mask
    /// of factors `0` or `1/(1-p)`. Pass-through when `mask` is `None`.
    pub fn dropout(&self, a: TensorId, mask: Option<&[f64]>) -> TensorId {
        match mask {
            None => a,
            Some(m) => {
                let value = {
                    let nodes = self.nodes.borrow();
                    let ta = &nodes[a.0].value;
                    assert_eq!(ta.len(), m.len(), "dropout mask length");
                    Tensor::new(
                        ta.rows,
                        ta.cols,
                        ta.data.iter().zip(m).map(|(x, f)| x * f).collect(),
                    )
                };
                self.push(value, Op::Dropout(a, m.to_vec()))
            }
        }
    }

    /// Straight-through Gumbel sample over the feasible entries of a logit
    /// vector: the forward value is the hard one-hot of the perturbed
    /// argmax; the backward pass uses the relaxed softmax jacobian at
    /// temperature `tau`. Returns the node and the hard index.
    pub fn gumbel_st<R: Rng>(
        &self,
        logits: TensorId,
        mask: &[bool],
        tau: f64,
        rng: &mut R,
    ) -> Result<(TensorId, usize), TensorError> {
        if tau <= 0.0 {
            return Err(TensorError::BadTemperature(tau));
        }
        if !mask.iter().any(|m| *m) {
            return Err(TensorError::EmptyMask);
        }
        let (soft, hard_idx, n) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[logits.0].value;
            if ta.rows != 1 || ta.cols != mask.len() {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("1x{}", mask.len()),
                    got: ta.shape_str(),
                });
            }
            let mut perturbed = vec![f64::NEG_INFINITY; ta.cols];
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let g = -(-u.ln()).ln();
                    perturbed[i] = (ta.data[i] + g) / tau;
                }
            }
            let max = perturbed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut soft = vec![0.0; ta.cols];
            let mut sum = 0.0;
            for i in 0..ta.cols {
                if mask[i] {
                    let e = (perturbed[i] - max).exp();
                    soft[i] = e;
                    sum += e;
                }
            }
            soft.iter_mut().for_each(|s| *s /= sum);
            let hard_idx = soft
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            (soft, hard_idx, ta.cols)
        };
        let mut hard = vec![0.0; n];
        hard[hard_idx] = 1.0;
        let id = self.push(
            Tensor::from_vec(hard),
            Op::GumbelSt(logits, soft, tau, mask.to_vec()),
        );
        Ok((id, hard_idx))
    }

    /// `log Σ_{j ∈ feasible} exp(x_j)`, max-shifted; the stable core of
    /// the constrained losses.
    pub fn masked_log_sum_exp(
        &self,
        a: TensorId,
        feasible: &[usize],
    ) -> Result<TensorId, TensorError> {
        if feasible.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let max = feasible
                .iter()
                .map(|&j| ta.data[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = feasible.iter().map(|&j| (ta.data[j] - max).exp()).sum();
            Tensor::scalar(max + sum.ln())
        };
        Ok(self.push(value, Op::MaskedLse(a, feasible.to_vec())))
    }

    /// `Σ w_j · x_j` over a sparse index/weight list.
    pub fn weighted_gather(
        &self,
        a: TensorId,
        weights: &[(usize, f64)],
    ) -> Result<TensorId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let sum: f64 = weights.iter().map(|&(j, w)| w * ta.data[j]).sum();
            Tensor::scalar(sum)
        };
        Ok(self.push(value, Op::WeightedGather(a, weights.to_vec())))
    }

    /// Reverse pass from a scalar root. Gradients of parameter leaves are
    /// accumulated into the store.
    pub fn backward(&self, root: TensorId, store: &mut ParamStore) {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(nodes[root.0].value.len(), 1, "backward needs a scalar root");
        for node in nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        nodes[root.0].grad[0] = 1.0;
        for i in (0..nodes.len()).rev() {
            let (left, right) = nodes.split_at_mut(i);
            let node = &right[0];
            if node.grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(idx) => {
                    let p = store.get_mut(*idx);
                    for (g, n) in p.grad.iter_mut().zip(&node.grad) {
                        *g += n;
                    }
                }
                Op::Add(a, b) => {
                    for (g, n) in left[a.0].grad.iter_mut().zip(&node.grad) {
                        *g += n;
                    }
                    for (g, n) in left[b.0].grad.iter_mut().zip(&node.grad) {
                        *g += n;
                    }
                }
                Op::Mul(a, b) => {
                    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                    if lo == hi {
                        // x*x: both factors are the same node
                        let pv: Vec<f64> = left[lo].value.data.clone();
                        for ((g, n), v) in left[lo].grad.iter_mut().zip(&node.grad).zip(&pv) {
                            *g += 2.0 * n * v;
                        }
                    } else {
                        let (la, lb) = left.split_at_mut(hi);
                        let (na, nb) = (&mut la[lo], &mut lb[0]);
                        let (first, second) = if a.0 < b.0 { (na, nb) } else { (nb, na) };
                        for i in 0..node.grad.len() {
                            first.grad[i] += node.grad[i] * second.value.data[i];
                            second.grad[i] += node.grad[i] * first.value.data[i];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    for (g, n) in left[a.0].grad.iter_mut().zip(&node.grad) {
                        *g += n * s;
                    }
                }
                Op::AddConst(a) => {
                    for (g, n) in left[a.0].grad.iter_mut().zip(&node.grad) {
                        *g += n;
                    }
                }
                Op::Matmul(a, b) => {
                    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                    debug_assert_ne!(lo, hi, "matmul with aliased operands is unsupported");
                    let (la, lb) = left.split_at_mut(hi);
                    let (first, second) = (&mut la[lo], &mut lb[0]);
                    let (an, bn) = if a.0 < b.0 {
                        (first, second)
                    } else {
                        (second, first)
                    };
                    // dA = dC @ B^T ; dB = A^T @ dC
                    let m = an.value.rows;
                    let k = an.value.cols;
                    let n = bn.value.cols;
                    for r in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += node.grad[r * n + c] * bn.value.data[j * n + c];
                            }
                            an.grad[r * k + j] += acc;
                        }
                    }
                    for j in 0..k {
                        for c in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += an.value.data[r * k + j] * node.grad[r * n + c];
                            }
                            bn.grad[j * n + c] += acc;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let p = &mut left[a.0];
                    let (rows, cols) = (node.value.rows, node.value.cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            p.grad[c * rows + r] += node.grad[r * cols + c];
                        }
                    }
                }
                Op::AddRowwise(a, b) => {
                    let cols = node.value.cols;
                    for (g, n) in left[a.0].grad.iter_mut().zip(&node.grad) {
                        *g += n;
                    }
                    let pb = &mut left[b.0];
                    for r in 0..node.value.rows {
                        for c in 0..cols {
                            pb.grad[c] += node.grad[r * cols + c];
                        }
                    }
                }
                Op::MulRowwise(a, b) => {
                    let cols = node.value.cols;
                    let rows = node.value.rows;
                    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                    let (la, lb) = left.split_at_mut(hi);
                    let (first, second) = (&mut la[lo], &mut lb[0]);
                    let (an, bn) = if a.0 < b.0 {
                        (first, second)
                    } else {
                        (second, first)
                    };
                    for r in 0..rows {
                        for c in 0..cols {
                            let n = node.grad[r * cols + c];
                            an.grad[r * cols + c] += n * bn.value.data[c];
                            bn.grad[c] += n * an.value.data[r * cols + c];
                        }
                    }
                }
                Op::Relu(a) => {
                    let p = &mut left[a.0];
                    for i in 0..node.grad.len() {
                        if p.value.data[i] > 0.0 {
                            p.grad[i] += node.grad[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let p = &mut left[a.0];
                    for i in 0..node.grad.len() {
                        let s = node.value.data[i];
                        p.grad[i] += node.grad[i] * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let p = &mut left[a.0];
                    for i in 0..node.grad.len() {
                        let t = node.value.data[i];
                        p.grad[i] += node.grad[i] * (1.0 - t * t);
                    }
                }
                Op::LayerNorm(a, eps) => {
                    let p = &mut left[a.0];
                    let cols = node.value.cols;
                    for r in 0..node.value.rows {
                        let row = &p.value.data[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let y = &node.value.data[r * cols..(r + 1) * cols];
                        let g = &node.grad[r * cols..(r + 1) * cols];
                        let g_mean = g.iter().sum::<f64>() / cols as f64;
                        let gy_mean =
                            g.iter().zip(y).map(|(gi, yi)| gi * yi).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            p.grad[r * cols + c] += inv * (g[c] - g_mean - y[c] * gy_mean);
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let p = &mut left[a.0];
                    let cols = node.value.cols;
                    for r in 0..node.value.rows {
                        let y = &node.value.data[r * cols..(r + 1) * cols];
                        let g = &node.grad[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..cols {
                            p.grad[r * cols + c] += y[c] * (g[c] - dot);
                        }
                    }
                }
                Op::SoftmaxMasked(a, mask) => {
                    let p = &mut left[a.0];
                    let y = &node.value.data;
                    let g = &node.grad;
                    let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            p.grad[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
                Op::Embedding(table, indices) => {
                    let p = &mut left[table.0];
                    let cols = node.value.cols;
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            p.grad[idx * cols + c] += node.grad[r * cols + c];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for id in parts {
                        let len = left[id.0].value.len();
                        for (g, n) in left[id.0]
                            .grad
                            .iter_mut()
                            .zip(&node.grad[offset..offset + len])
                        {
                            *g += n;
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows;
                    let total = node.value.cols;
                    let mut offset = 0;
                    for id in parts {
                        let cols = left[id.0].value.cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                left[id.0].grad[r * cols + c] +=
                                    node.grad[r * total + offset + c];
                            }
                        }
                        offset += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let p = &mut left[a.0];
                    let pcols = p.value.cols;
                    let cols = node.value.cols;
                    for r in 0..node.value.rows {
                        for c in 0..cols {
                            p.grad[r * pcols + start + c] += node.grad[r * cols + c];
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let p = &mut left[a.0];
                    let cols = node.value.cols;
                    for r in 0..node.value.rows {
                        for c in 0..cols {
                            p.grad[(start + r) * cols + c] += node.grad[r * cols + c];
                        }
                    }
                }
                Op::MeanMasked(a, weights) => {
                    let p = &mut left[a.0];
                    let cols = node.value.cols;
                    for (r, w) in weights.iter().enumerate() {
                        if *w != 0.0 {
                            for c in 0..cols {
                                p.grad[r * cols + c] += node.grad[c] * w;
                            }
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let p = &mut left[a.0];
                    for i in 0..node.grad.len() {
                        p.grad[i] += node.grad[i] * mask[i];
                    }
                }
                Op::GumbelSt(a, soft, tau, mask) => {
                    // straight-through: gradient of the relaxed softmax
                    let p = &mut left[a.0];
                    let dot: f64 = soft
                        .iter()
                        .zip(&node.grad)
                        .map(|(si, gi)| si * gi)
                        .sum();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            p.grad[i] += soft[i] * (node.grad[i] - dot) / tau;
                        }
                    }
                }
                Op::MaskedLse(a, feasible) => {
                    let p = &mut left[a.0];
                    let lse = node.value.data[0];
                    let g = node.grad[0];
                    for &j in feasible {
                        p.grad[j] += g * (p.value.data[j] - lse).exp();
                    }
                }
                Op::WeightedGather(a, weights) => {
                    let p = &mut left[a.0];
                    let g = node.grad[0];
                    for &(j, w) in weights {
                        p.grad[j] += g * w;
                    }
                }
            }
        }
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        let arow = a.row(r);
        let out = &mut data[r * n..(r + 1) * n];
        for (j, &av) in arow.iter().enumerate().take(k) {
            if av != 0.0 {
                let brow = &b.data[j * n..(j + 1) * n];
                for c in 0..n {
                    out[c] += av * brow[c];
                }
            }
        }
    }
    Tensor::new(m, n, data)
}

/// Masked softmax on raw values: a `-1e9` surrogate is added to disabled
/// logits before the max-shifted normalization, and disabled outputs are
/// forced to exact zero.
pub fn masked_softmax_values(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    const NEG: f64 = -1e9;
    let shifted: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, m)| if *m { *l } else { l + NEG })
        .collect();
    let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = shifted.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for (o, m) in out.iter_mut().zip(mask) {
        *o = if *m { *o / sum } else { 0.0 };
    }
    // renormalize over the enabled entries so the surrogate's residual
    // mass cannot leak
    let enabled_sum: f64 = out.iter().sum();
    if enabled_sum > 0.0 {
        for o in out.iter_mut() {
            *o /= enabled_sum;
        }
    }
    out
}

/// Deterministic per-call-site dropout masks keyed by (seed, layer id,
/// call counter); identical call orders replay identical masks.
#[derive(Debug, Clone)]
pub struct DropoutCtx {
    seed: u64,
    counter: u64,
    pub p: f64,
    pub train: bool,
}

impl DropoutCtx {
    pub fn new(seed: u64, p: f64, train: bool) -> Self {
        Self {
            seed,
            counter: 0,
            p,
            train,
        }
    }

    pub fn disabled() -> Self {
        Self::new(0, 0.0, false)
    }

    /// Next mask of scale factors, or `None` when inactive.
    pub fn next_mask(&mut self, len: usize, layer_id: u64) -> Option<Vec<f64>> {
        if !self.train || self.p <= 0.0 {
            return None;
        }
        let call = self.counter;
        self.counter += 1;
        let mut state = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(layer_id.wrapping_mul(0xbf58476d1ce4e5b9))
            .wrapping_add(call.wrapping_mul(0x94d049bb133111eb));
        let keep = 1.0 / (1.0 - self.p);
        Some(
            (0..len)
                .map(|_| {
                    state = splitmix64(state);
                    let u = (state >> 11) as f64 / (1u64 << 53) as f64;
                    if u < self.p {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect(),
        )
    }

    pub fn reset(&mut self) {
        self.counter = 0;
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
