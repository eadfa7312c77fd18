//! Reverse-mode autodiff over dense f64 matrices.
//!
//! The [`Tape`] records operations as they execute (define-by-run) and
//! [`Tape::backward`] replays them in reverse, accumulating parameter
//! gradients into a [`ParamStore`]. The op set is exactly what the
//! attention model and its training loss need: affine layers, tanh,
//! elementwise arithmetic, column gathers for edge assembly, and masked
//! row-wise softmax / log-softmax / entropy where the mask marks valid
//! entries.
//!
//! Parameters live in one flat buffer so gradient clipping and SGD steps
//! are single passes, and checkpoints are a straight dump of the named
//! tensors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint does not start with the expected magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint ends in the middle of a record")]
    Truncated,
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("tensor {0} declared twice")]
    Duplicate(String),
    #[error("unknown tensor {0}")]
    Unknown(String),
}

const CKPT_MAGIC: [u8; 4] = *b"MGNN";
const CKPT_VERSION: u16 = 1;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// The single entry of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() on a non-scalar");
        self.data[0]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Named parameter tensors in one flat buffer, with matching gradients.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            offsets: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
            grad: Vec::new(),
        }
    }

    /// Register a tensor, filling it from `init` in row-major order.
    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        mut init: impl FnMut() -> f64,
    ) -> Result<(), NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::Duplicate(name.to_string()));
        }
        let len: usize = shape.iter().product();
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.offsets.push(self.data.len());
        for _ in 0..len {
            self.data.push(init());
        }
        self.grad.resize(self.data.len(), 0.0);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.index.get(name).map(|&i| self.shapes[i].as_slice())
    }

    fn span(&self, name: &str) -> Result<(usize, usize), NnError> {
        let &i = self.index.get(name).ok_or_else(|| NnError::Unknown(name.to_string()))?;
        let len: usize = self.shapes[i].iter().product();
        Ok((self.offsets[i], len))
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64], NnError> {
        let (off, len) = self.span(name)?;
        Ok(&self.data[off..off + len])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grads(&self) -> &[f64] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescale gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            self.grad.iter_mut().for_each(|g| *g *= scale);
        }
        norm
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for (p, g) in self.data.iter_mut().zip(&self.grad) {
            *p -= lr * g;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for (i, name) in self.names.iter().enumerate() {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(self.shapes[i].len() as u8);
            for &d in &self.shapes[i] {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let len: usize = self.shapes[i].iter().product();
            for &v in &self.data[self.offsets[i]..self.offsets[i] + len] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader { bytes: &bytes, at: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(NnError::BadMagic);
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(NnError::BadVersion(version));
        }
        let mut store = ParamStore::new();
        while !r.done() {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| NnError::BadName)?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let mut it = values.into_iter();
            store.add(&name, &shape, || it.next().unwrap())?;
        }
        Ok(store)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.at + n > self.bytes.len() {
            return Err(NnError::Truncated);
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Node id on a [`Tape`].
pub type NodeId = usize;

enum Op {
    Const,
    Param { offset: usize },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddColBroadcast { a: NodeId, bias: NodeId },
    Scale { a: NodeId, k: f64 },
    Mul { a: NodeId, b: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Sum { a: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    GatherCols { a: NodeId, idx: Vec<usize> },
    GatherEntries { a: NodeId, idx: Vec<(usize, usize)> },
    Reshape { a: NodeId },
    MaskedSoftmaxRows { a: NodeId, mask: Vec<bool> },
    MaskedLogSoftmaxRows { a: NodeId, mask: Vec<bool> },
    MaskedEntropyRows { a: NodeId, mask: Vec<bool> },
    MinElem { a: NodeId, b: NodeId },
    ClampConst { a: NodeId, lo: f64, hi: f64 },
}

struct Node {
    op: Op,
    value: Mat,
}

/// Define-by-run computation tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(Op::Const, m)
    }

    /// Load a parameter tensor as a `rows x cols` matrix (row-major).
    pub fn param(
        &mut self,
        store: &ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId, NnError> {
        let (offset, len) = store.span(name)?;
        assert_eq!(len, rows * cols, "param {name} cannot be viewed as {rows}x{cols}");
        let value = Mat::from_vec(rows, cols, store.data[offset..offset + len].to_vec());
        Ok(self.push(Op::Param { offset }, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(Op::MatMul { a, b }, value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.transpose();
        self.push(Op::Transpose { a }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x + y);
        self.push(Op::Add { a, b }, value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Add a `rows x 1` bias to every column of `a`.
    pub fn add_col(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[bias].value);
        assert_eq!(bv.cols, 1, "bias must be a column");
        assert_eq!(av.rows, bv.rows, "bias length mismatch");
        let value = Mat::from_fn(av.rows, av.cols, |r, c| av.get(r, c) + bv.get(r, 0));
        self.push(Op::AddColBroadcast { a, bias }, value)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.nodes[a].value.map(|v| k * v);
        self.push(Op::Scale { a, k }, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x * y);
        self.push(Op::Mul { a, b }, value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::tanh);
        self.push(Op::Tanh { a }, value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp { a }, value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Mat::scalar(self.nodes[a].value.data.iter().sum());
        self.push(Op::Sum { a }, value)
    }

    /// Stack `a` on top of `b` (same column count).
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.cols, bv.cols, "concat_rows column mismatch");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let value = Mat::from_vec(av.rows + bv.rows, av.cols, data);
        self.push(Op::ConcatRows { a, b }, value)
    }

    /// Column selection: output column `e` is input column `idx[e]`.
    pub fn gather_cols(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let av = &self.nodes[a].value;
        let value = Mat::from_fn(av.rows, idx.len(), |r, e| av.get(r, idx[e]));
        self.push(Op::GatherCols { a, idx }, value)
    }

    /// Entry selection into a `1 x idx.len()` row.
    pub fn gather_entries(&mut self, a: NodeId, idx: Vec<(usize, usize)>) -> NodeId {
        let av = &self.nodes[a].value;
        let value = Mat::from_fn(1, idx.len(), |_, e| av.get(idx[e].0, idx[e].1));
        self.push(Op::GatherEntries { a, idx }, value)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(av.rows * av.cols, rows * cols, "reshape changes element count");
        let value = Mat::from_vec(rows, cols, av.data.clone());
        self.push(Op::Reshape { a }, value)
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries
    /// come out zero, and a fully masked row stays all-zero.
    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(mask.len(), av.rows * av.cols, "mask size mismatch");
        let mut value = Mat::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            softmax_row(av, &mask, r, &mut value);
        }
        self.push(Op::MaskedSoftmaxRows { a, mask }, value)
    }

    /// Row-wise log-softmax over unmasked entries; masked entries are zero.
    pub fn masked_log_softmax_rows(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(mask.len(), av.rows * av.cols, "mask size mismatch");
        let mut value = Mat::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = r * av.cols;
            let m = (0..av.cols).filter(|&c| mask[row + c]);
            let max = m.clone().map(|c| av.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max + m.clone().map(|c| (av.get(r, c) - max).exp()).sum::<f64>().ln();
            for c in m {
                value.set(r, c, av.get(r, c) - lse);
            }
        }
        self.push(Op::MaskedLogSoftmaxRows { a, mask }, value)
    }

    /// Per-row entropy of the masked softmax distribution, as `rows x 1`.
    /// Fully masked rows yield zero.
    pub fn masked_entropy_rows(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(mask.len(), av.rows * av.cols, "mask size mismatch");
        let mut probs = Mat::zeros(av.rows, av.cols);
        let mut value = Mat::zeros(av.rows, 1);
        for r in 0..av.rows {
            softmax_row(av, &mask, r, &mut probs);
            let h = (0..av.cols)
                .filter(|&c| mask[r * av.cols + c])
                .map(|c| {
                    let p = probs.get(r, c);
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            value.set(r, 0, h);
        }
        self.push(Op::MaskedEntropyRows { a, mask }, value)
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.zip(&self.nodes[b].value, f64::min);
        self.push(Op::MinElem { a, b }, value)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[a].value.map(|v| v.clamp(lo, hi));
        self.push(Op::ClampConst { a, lo, hi }, value)
    }

    /// Backpropagate from a scalar loss node, accumulating parameter
    /// gradients into `store` (on top of whatever is already there).
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) {
        assert_eq!(
            (self.nodes[loss].value.rows, self.nodes[loss].value.cols),
            (1, 1),
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::scalar(1.0));
        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param { offset } => {
                    for (i, v) in g.data.iter().enumerate() {
                        store.grad[offset + i] += v;
                    }
                }
                Op::MatMul { a, b } => {
                    let da = g.matmul(&self.nodes[*b].value.transpose());
                    let db = self.nodes[*a].value.transpose().matmul(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose { a } => acc(&mut grads, *a, g.transpose()),
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddColBroadcast { a, bias } => {
                    let mut db = Mat::zeros(g.rows, 1);
                    for r in 0..g.rows {
                        db.set(r, 0, (0..g.cols).map(|c| g.get(r, c)).sum());
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *bias, db);
                }
                Op::Scale { a, k } => acc(&mut grads, *a, g.map(|v| k * v)),
                Op::Mul { a, b } => {
                    let da = g.zip(&self.nodes[*b].value, |x, y| x * y);
                    let db = g.zip(&self.nodes[*a].value, |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Tanh { a } => {
                    let da = g.zip(&self.nodes[id].value, |gv, y| gv * (1.0 - y * y));
                    acc(&mut grads, *a, da);
                }
                Op::Exp { a } => {
                    let da = g.zip(&self.nodes[id].value, |gv, y| gv * y);
                    acc(&mut grads, *a, da);
                }
                Op::Sum { a } => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, Mat::from_fn(av.rows, av.cols, |_, _| g.item()));
                }
                Op::ConcatRows { a, b } => {
                    let ra = self.nodes[*a].value.rows;
                    let cols = g.cols;
                    let da = Mat::from_vec(ra, cols, g.data[..ra * cols].to_vec());
                    let db = Mat::from_vec(g.rows - ra, cols, g.data[ra * cols..].to_vec());
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::GatherCols { a, idx } => {
                    let av = &self.nodes[*a].value;
                    let mut da = Mat::zeros(av.rows, av.cols);
                    for (e, &src) in idx.iter().enumerate() {
                        for r in 0..g.rows {
                            da.set(r, src, da.get(r, src) + g.get(r, e));
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::GatherEntries { a, idx } => {
                    let av = &self.nodes[*a].value;
                    let mut da = Mat::zeros(av.rows, av.cols);
                    for (e, &(r, c)) in idx.iter().enumerate() {
                        da.set(r, c, da.get(r, c) + g.get(0, e));
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Reshape { a } => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, Mat::from_vec(av.rows, av.cols, g.data.clone()));
                }
                Op::MaskedSoftmaxRows { a, mask } => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = (0..y.cols)
                            .filter(|&c| mask[r * y.cols + c])
                            .map(|c| g.get(r, c) * y.get(r, c))
                            .sum();
                        for c in (0..y.cols).filter(|&c| mask[r * y.cols + c]) {
                            da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::MaskedLogSoftmaxRows { a, mask } => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gsum: f64 = (0..y.cols)
                            .filter(|&c| mask[r * y.cols + c])
                            .map(|c| g.get(r, c))
                            .sum();
                        for c in (0..y.cols).filter(|&c| mask[r * y.cols + c]) {
                            da.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::MaskedEntropyRows { a, mask } => {
                    let av = &self.nodes[*a].value;
                    let h = &self.nodes[id].value;
                    let mut probs = Mat::zeros(av.rows, av.cols);
                    let mut da = Mat::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        softmax_row(av, mask, r, &mut probs);
                        for c in (0..av.cols).filter(|&c| mask[r * av.cols + c]) {
                            let p = probs.get(r, c);
                            if p > 0.0 {
                                da.set(r, c, -g.get(r, 0) * p * (p.ln() + h.get(r, 0)));
                            }
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::MinElem { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = Mat::from_fn(g.rows, g.cols, |r, c| {
                        if av.get(r, c) <= bv.get(r, c) {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    let db = Mat::from_fn(g.rows, g.cols, |r, c| {
                        if av.get(r, c) > bv.get(r, c) {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::ClampConst { a, lo, hi } => {
                    let av = &self.nodes[*a].value;
                    let da = Mat::from_fn(g.rows, g.cols, |r, c| {
                        let x = av.get(r, c);
                        if x > *lo && x < *hi {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, da);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_row(x: &Mat, mask: &[bool], r: usize, out: &mut Mat) {
    let cols = x.cols;
    let picked: Vec<usize> = (0..cols).filter(|&c| mask[r * cols + c]).collect();
    if picked.is_empty() {
        for c in 0..cols {
            out.set(r, c, 0.0);
        }
        return;
    }
    let max = picked.iter().map(|&c| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &c in &picked {
        total += (x.get(r, c) - max).exp();
    }
    for c in 0..cols {
        out.set(r, c, 0.0);
    }
    for &c in &picked {
        out.set(r, c, (x.get(r, c) - max).exp() / total);
    }
}

fn acc(grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}
