//! Per-node storage laid out slice by slice.

use serde::Serialize;

/// A vector of `dim` reals attached to every lattice node.
///
/// `data[k]` holds the values for time slice `k`, node-major, so node `i`
/// occupies `data[k][i * dim..(i + 1) * dim]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeField {
    dim: usize,
    data: Vec<Vec<f64>>,
}

impl NodeField {
    pub fn zeros(dim: usize, slice_sizes: &[usize]) -> Self {
        Self {
            dim,
            data: slice_sizes.iter().map(|&n| vec![0.0; n * dim]).collect(),
        }
    }

    pub fn from_slices(dim: usize, data: Vec<Vec<f64>>) -> Self {
        debug_assert!(dim == 0 || data.iter().all(|s| s.len() % dim == 0));
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slice_count(&self) -> usize {
        self.data.len()
    }

    pub fn slice_len(&self, k: usize) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data[k].len() / self.dim
        }
    }

    pub fn get(&self, k: usize, i: usize) -> &[f64] {
        &self.data[k][i * self.dim..(i + 1) * self.dim]
    }

    pub fn get_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        &mut self.data[k][i * self.dim..(i + 1) * self.dim]
    }

    /// Scalar accessor for one-dimensional fields.
    pub fn at(&self, k: usize, i: usize) -> f64 {
        self.data[k][i * self.dim]
    }

    pub fn set(&mut self, k: usize, i: usize, v: f64) {
        self.data[k][i * self.dim] = v;
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.data[k]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k]
    }

    pub fn slices(&self) -> &[Vec<f64>] {
        &self.data
    }

    /// Elementwise map over two fields of equal shape.
    pub fn zip_with(&self, other: &NodeField, f: impl Fn(f64, f64) -> f64) -> NodeField {
        assert_eq!(self.dim, other.dim);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        NodeField {
            dim: self.dim,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NodeField {
        NodeField {
            dim: self.dim,
            data: self
                .data
                .iter()
                .map(|s| s.iter().map(|&x| f(x)).collect())
                .collect(),
        }
    }

    /// Largest absolute entry over the first `slices` time slices.
    pub fn max_abs_through(&self, slices: usize) -> f64 {
        self.data
            .iter()
            .take(slices)
            .flat_map(|s| s.iter())
            .fold(0.0_f64, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs_through(self.data.len())
    }

    /// Largest absolute difference against another field of equal shape.
    pub fn max_abs_diff(&self, other: &NodeField) -> f64 {
        self.max_abs_diff_through(other, self.data.len())
    }

    pub fn max_abs_diff_through(&self, other: &NodeField, slices: usize) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data
            .iter()
            .zip(&other.data)
            .take(slices)
            .flat_map(|(a, b)| a.iter().zip(b))
            .fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()))
    }
}

/// Compensated (Neumaier) sum.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in values {
        let t = sum + x;
        if f64::abs(sum) >= f64::abs(x) {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
