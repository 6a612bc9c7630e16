//! Dense row-major tensors, the mode-n product, element-wise multiplication,
//! and the index-reordering maps that turn flat signals into nested tiles.
//!
//! # Reordered tiles
//!
//! Nesting a kernel `F(m, r)` to depth `d` views a flat index as `d` digits in
//! base `r`: position `q = sum_j k_j * r^j`. A *reordered tile* is the rank-`d`
//! tensor `T[(k_0, ..., k_(d-1))] = v[offset + sum_j k_j * r^j]`, where tensor
//! axis `j` carries digit `k_j` (axis 0 is the innermost level, weight `r^0`).
//! Filters reorder with every axis of extent `r` and zero-padding past the
//! filter's end; input windows reorder with every axis of extent `l`, which
//! makes adjacent tile entries overlap in the source — exactly the redundancy
//! the nested engine exploits.

use serde::{Deserialize, Serialize};

use crate::counter;

/// Floating-point scalar the engines are generic over (`f32` or `f64`).
pub trait Scalar:
    num_traits::Float + Copy + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("zero-size dimensions are forbidden (shape {0:?})")]
    ZeroDim(Vec<usize>),
    #[error("rank must be at least 1")]
    EmptyShape,
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("matrix has {mat_cols} columns but axis extent is {axis_len}")]
    ModeMismatch { mat_cols: usize, axis_len: usize },
    #[error("element-wise product needs equal shapes, got {0:?} vs {1:?}")]
    EwmmShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("filter of length {len} does not fit {r}^{depth} slots")]
    FilterTooLong { len: usize, r: usize, depth: usize },
    #[error("window [{offset}, {offset}+{window}) exceeds source length {len}")]
    WindowOutOfRange { offset: usize, window: usize, len: usize },
    #[error("reorder parameters must be positive (l={l}, r={r}, depth={depth})")]
    BadReorder { l: usize, r: usize, depth: usize },
}

/// Dense row-major matrix of floats.
#[derive(Clone, Debug, PartialEq)]
pub struct MatOf<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

pub type Mat = MatOf<f64>;

impl<S: Scalar> MatOf<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape/data mismatch");
        MatOf { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatOf { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    /// Count of exactly-zero entries' complement (structural nonzeros).
    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }
}

/// Dense row-major tensor (axis 0 slowest-varying).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorOf<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub type Tensor = TensorOf<f64>;

impl<S: Scalar> TensorOf<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if shape.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch { shape, expected, actual: data.len() });
        }
        Ok(TensorOf { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && n > 0, "invalid shape {shape:?}");
        TensorOf { shape, data: vec![S::zero(); n] }
    }

    /// Rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<S>) -> Self {
        assert!(!data.is_empty());
        TensorOf { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Row-major flat offset of a full multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&k, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(k < dim, "index {k} out of range on axis {i}");
            let _ = i;
            flat = flat * dim + k;
        }
        flat
    }

    pub fn get(&self, idx: &[usize]) -> S {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let flat = self.flat_index(idx);
        self.data[flat] = v;
    }

    /// Element-wise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::EwmmShapeMismatch(self.shape.clone(), other.shape.clone()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Same data reinterpreted with a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Lower/raise precision element-wise.
    pub fn cast<T: Scalar>(&self) -> TensorOf<T> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.into_f64())).collect(),
        }
    }
}

/// Mode-`axis` product: contract `m`'s columns against the tensor's `axis`
/// fibers. The result replaces that axis extent with `m.rows()`.
///
/// Fiber dot products accumulate in ascending index order, so repeated
/// applications are deterministic.
pub fn mode_product<S: Scalar>(
    t: &TensorOf<S>,
    m: &MatOf<S>,
    axis: usize,
) -> Result<TensorOf<S>, TensorError> {
    let rank = t.rank();
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { axis, rank });
    }
    let mid = t.shape[axis];
    if m.cols() != mid {
        return Err(TensorError::ModeMismatch { mat_cols: m.cols(), axis_len: mid });
    }
    let inner: usize = t.shape[axis + 1..].iter().product();
    let outer: usize = t.shape[..axis].iter().product();

    let mut shape = t.shape.clone();
    shape[axis] = m.rows();
    let mut out = vec![S::zero(); outer * m.rows() * inner];
    for o in 0..outer {
        let src_base = o * mid * inner;
        let dst_base = o * m.rows() * inner;
        for row in 0..m.rows() {
            for i in 0..inner {
                let mut acc = S::zero();
                for k in 0..mid {
                    acc = acc + m.get(row, k) * t.data[src_base + k * inner + i];
                }
                out[dst_base + row * inner + i] = acc;
            }
        }
    }
    TensorOf::new(shape, out)
}

/// Element-wise multiplication. Every scalar product is a *general*
/// multiplication, so the global counter advances by the element count.
pub fn ewmm<S: Scalar>(a: &TensorOf<S>, b: &TensorOf<S>) -> Result<TensorOf<S>, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::EwmmShapeMismatch(a.shape.clone(), b.shape.clone()));
    }
    counter::add(a.data.len() as u64);
    let data = a.data.iter().zip(&b.data).map(|(x, y)| *x * *y).collect();
    TensorOf::new(a.shape.clone(), data)
}

/// A tile produced by one of the reorder maps, remembering where in the
/// source vector it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ReorderedTile<S> {
    pub tensor: TensorOf<S>,
    pub source_offset: usize,
}

/// Input window length consumed by one depth-`d` tile:
/// `1 + (l-1) * (1 + r + ... + r^(d-1))`.
pub fn window_size(l: usize, r: usize, depth: usize) -> usize {
    let mut geom = 0usize;
    let mut pow = 1usize;
    for _ in 0..depth {
        geom += pow;
        pow *= r;
    }
    1 + (l - 1) * geom
}

/// Reorder a filter into a rank-`depth` tile of extent `r` per axis:
/// `T[(k_0, ..)] = w[sum k_j r^j]`, zero-padded past `w`'s end.
///
/// ```
/// use winolab_core::reorder_filter;
/// let t = reorder_filter(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
/// // Columns of the 2x2 tile are [w0, w1] and [w2, w3].
/// assert_eq!(t.tensor.get(&[0, 0]), 1.0);
/// assert_eq!(t.tensor.get(&[1, 0]), 2.0);
/// assert_eq!(t.tensor.get(&[0, 1]), 3.0);
/// assert_eq!(t.tensor.get(&[1, 1]), 4.0);
/// ```
pub fn reorder_filter<S: Scalar>(
    w: &[S],
    r: usize,
    depth: usize,
) -> Result<ReorderedTile<S>, TensorError> {
    if r == 0 || depth == 0 {
        return Err(TensorError::BadReorder { l: 0, r, depth });
    }
    let slots = r.checked_pow(depth as u32).expect("tile size overflow");
    if w.len() > slots {
        return Err(TensorError::FilterTooLong { len: w.len(), r, depth });
    }
    let mut tensor = TensorOf::zeros(vec![r; depth]);
    let weights = axis_weights(r, depth);
    let mut idx = vec![0usize; depth];
    loop {
        let src: usize = idx.iter().zip(&weights).map(|(&k, &w)| k * w).sum();
        if src < w.len() {
            tensor.set(&idx, w[src]);
        }
        if !advance(&mut idx, r) {
            break;
        }
    }
    Ok(ReorderedTile { tensor, source_offset: 0 })
}

/// Reorder one input window into a rank-`depth` tile of extent `l` per axis:
/// `T[(k_0, ..)] = x[offset + sum k_j r^j]`. The whole window must lie inside
/// `x` (see [`window_size`]).
pub fn reorder_input_slice<S: Scalar>(
    x: &[S],
    offset: usize,
    l: usize,
    r: usize,
    depth: usize,
) -> Result<ReorderedTile<S>, TensorError> {
    if l == 0 || r == 0 || depth == 0 {
        return Err(TensorError::BadReorder { l, r, depth });
    }
    let window = window_size(l, r, depth);
    if offset + window > x.len() {
        return Err(TensorError::WindowOutOfRange { offset, window, len: x.len() });
    }
    let mut tensor = TensorOf::zeros(vec![l; depth]);
    let weights = axis_weights(r, depth);
    let mut idx = vec![0usize; depth];
    loop {
        let src: usize = idx.iter().zip(&weights).map(|(&k, &w)| k * w).sum();
        tensor.set(&idx, x[offset + src]);
        if !advance(&mut idx, l) {
            break;
        }
    }
    Ok(ReorderedTile { tensor, source_offset: offset })
}

/// Digit weights `[r^0, r^1, ..., r^(depth-1)]` — axis `j` carries `r^j`.
pub(crate) fn axis_weights(r: usize, depth: usize) -> Vec<usize> {
    let mut weights = Vec::with_capacity(depth);
    let mut pow = 1usize;
    for _ in 0..depth {
        weights.push(pow);
        pow *= r;
    }
    weights
}

/// Odometer step over a cubical index space of extent `extent` per axis;
/// the *last* axis varies fastest. Returns false after the final index.
pub(crate) fn advance(idx: &mut [usize], extent: usize) -> bool {
    for k in idx.iter_mut().rev() {
        *k += 1;
        if *k < extent {
            return true;
        }
        *k = 0;
    }
    false
}
