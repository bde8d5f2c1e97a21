//! Dense row-major `f64` arrays.
//!
//! Broadcasting follows trailing-axis alignment: shapes are right-aligned,
//! missing leading axes count as extent 1, and two extents are compatible
//! when they are equal or one of them is 1. The result takes the larger
//! extent on every axis.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "array",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Extent of the first axis (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements in one first-axis slice.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Copies the given first-axis slices, in order. Duplicates allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::contract("gather_rows on a scalar"));
        }
        let n = self.shape[0];
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= n {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Array { shape, data })
    }

    /// Adds row `k` of `self` into row `indices[k]` of a zero array with
    /// `rows` first-axis extent.
    pub fn scatter_add_rows(&self, indices: &[usize], rows: usize) -> Result<Self> {
        if self.shape.is_empty() || self.shape[0] != indices.len() {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: self.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = rows;
        let mut out = Array::zeros(&shape);
        for (k, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index {
                    op: "scatter_add_rows",
                    index: i,
                    bound: rows,
                });
            }
            let src = &self.data[k * w..(k + 1) * w];
            for (d, s) in out.data[i * w..(i + 1) * w].iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(out)
    }

    pub fn transpose2(&self) -> Self {
        assert_eq!(self.rank(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Array {
            shape: vec![c, r],
            data,
        }
    }
}

/// Plain `[n,k] x [k,m]` product.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k < rank - a.len() {
            1
        } else {
            a[k - (rank - a.len())]
        };
        let db = if k < rank - b.len() {
            1
        } else {
            b[k - (rank - b.len())]
        };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed inside `target` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - shape.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for k in (0..shape.len()).rev() {
        if shape[k] != 1 {
            strides[k + offset] = acc;
        }
        acc *= shape[k];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// flat offsets given by each stride set.
fn for_each_offset<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut f: impl FnMut([usize; N]),
) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = [0usize; N];
    for _ in 0..total {
        f(off);
        for k in (0..rank).rev() {
            idx[k] += 1;
            for (o, s) in off.iter_mut().zip(strides.iter()) {
                *o += s[k];
            }
            if idx[k] < shape[k] {
                break;
            }
            for (o, s) in off.iter_mut().zip(strides.iter()) {
                *o -= s[k] * shape[k];
            }
            idx[k] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array> {
    if a.shape == b.shape {
        return Ok(a.zip_map(b, f));
    }
    let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    if b.len() == 1 {
        let bv = b.data[0];
        let data = a.data.iter().map(|&x| f(x, bv)).collect();
        return Array::new(shape, data);
    }
    if a.len() == 1 {
        let av = a.data[0];
        let data = b.data.iter().map(|&y| f(av, y)).collect();
        return Array::new(shape, data);
    }
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for_each_offset(&shape, [&sa, &sb], |[ia, ib]| {
        data.push(f(a.data[ia], b.data[ib]))
    });
    Array::new(shape, data)
}

pub(crate) fn broadcast_to(a: &Array, shape: &[usize]) -> Result<Array> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    match broadcast_shape(&a.shape, shape) {
        Some(s) if s == shape => {}
        _ => {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: a.shape.clone(),
                rhs: shape.to_vec(),
            })
        }
    }
    let sa = broadcast_strides(&a.shape, shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for_each_offset(shape, [&sa], |[ia]| data.push(a.data[ia]));
    Array::new(shape.to_vec(), data)
}

/// Sums `grad` (shaped like a broadcast result) back down to `shape`.
pub(crate) fn sum_to_shape(grad: &Array, shape: &[usize]) -> Array {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = Array::zeros(shape);
    if out.len() == 1 {
        out.data[0] = grad.sum();
        return out;
    }
    let so = broadcast_strides(shape, &grad.shape);
    let mut k = 0;
    for_each_offset(&grad.shape, [&so], |[io]| {
        out.data[io] += grad.data[k];
        k += 1;
    });
    out
}

/// Sums over one axis, removing it.
pub(crate) fn sum_axis(a: &Array, axis: usize) -> Array {
    let outer: usize = a.shape[..axis].iter().product();
    let n = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &a.data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    Array { shape, data }
}

/// Inverse of [`sum_axis`] for gradients: repeats along a new axis.
pub(crate) fn expand_axis(a: &Array, axis: usize, n: usize) -> Array {
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis..].iter().product();
    let mut data = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let src = &a.data[o * inner..(o + 1) * inner];
        for _ in 0..n {
            data.extend_from_slice(src);
        }
    }
    let mut shape = a.shape.clone();
    shape.insert(axis, n);
    Array { shape, data }
}

pub(crate) fn concat(arrays: &[&Array], axis: usize) -> Result<Array> {
    let first = arrays
        .first()
        .ok_or_else(|| Error::contract("concat of zero arrays"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::contract(format!(
            "concat axis {axis} for rank {rank}"
        )));
    }
    for a in arrays {
        let same = a.rank() == rank
            && a.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(k, (x, y))| k == axis || x == y);
        if !same {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: a.shape.clone(),
            });
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total_axis: usize = arrays.iter().map(|a| a.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for a in arrays {
            let w = a.shape[axis] * inner;
            data.extend_from_slice(&a.data[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total_axis;
    Array::new(shape, data)
}

/// Extracts `[start, end)` along `axis`.
pub(crate) fn narrow(a: &Array, axis: usize, start: usize, end: usize) -> Array {
    let outer: usize = a.shape[..axis].iter().product();
    let n = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        data.extend_from_slice(&a.data[(o * n + start) * inner..(o * n + end) * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = end - start;
    Array { shape, data }
}

/// Adjoint of [`narrow`]: places `g` at `[start, start + len)` in zeros of `shape`.
pub(crate) fn pad_axis(g: &Array, shape: &[usize], axis: usize, start: usize) -> Array {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let len = g.shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Array::zeros(shape);
    for o in 0..outer {
        let src = &g.data[o * len * inner..(o + 1) * len * inner];
        out.data[(o * n + start) * inner..(o * n + start + len) * inner].copy_from_slice(src);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 1], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
        assert_eq!(broadcast_shape(&[0, 2], &[1, 2]), Some(vec![0, 2]));
    }

    #[test]
    fn broadcast_binary_and_reduce_back() {
        let a = Array::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Array::matrix(2, 1, vec![10., 20.]).unwrap();
        let c = broadcast_binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 12., 13., 24., 25., 26.]);
        let back = sum_to_shape(&c, &[2, 1]);
        assert_eq!(back.data(), &[36., 75.]);
        let row = Array::vector(vec![1., 1., 1.]);
        let d = broadcast_binary("mul", &a, &row, |x, y| x * y).unwrap();
        assert_eq!(d, a);
        assert_eq!(sum_to_shape(&a, &[3]).data(), &[5., 7., 9.]);
    }

    #[test]
    fn gather_and_scatter() {
        let a = Array::matrix(3, 2, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let g = a.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[4., 5., 0., 1., 4., 5.]);
        let s = g.scatter_add_rows(&[2, 0, 2], 3).unwrap();
        assert_eq!(s.data(), &[0., 1., 0., 0., 8., 10.]);
        assert!(matches!(
            a.gather_rows(&[3]),
            Err(Error::Index {
                index: 3,
                bound: 3,
                ..
            })
        ));
    }

    #[test]
    fn concat_narrow_pad() {
        let a = Array::matrix(2, 1, vec![1., 2.]).unwrap();
        let b = Array::matrix(2, 2, vec![3., 4., 5., 6.]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        let n = narrow(&c, 1, 1, 3);
        assert_eq!(n, b);
        let p = pad_axis(&n, &[2, 3], 1, 1);
        assert_eq!(p.data(), &[0., 3., 4., 0., 5., 6.]);
    }

    #[test]
    fn axis_sums() {
        let a = Array::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(sum_axis(&a, 1).data(), &[2., 4., 10., 12.]);
        let e = expand_axis(&sum_axis(&a, 1), 1, 2);
        assert_eq!(e.shape(), &[2, 2, 2]);
    }
}
