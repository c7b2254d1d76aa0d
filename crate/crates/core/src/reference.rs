//! Strided reference set with exact top-k L2 retrieval.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, Real};

/// Tokens whose index is a multiple of `stride`, kept in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet<T> {
    stride: usize,
    width: usize,
    token_indices: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> ReferenceSet<T> {
    pub fn new(stride: usize, width: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("reference stride must be at least 1".into()));
        }
        Ok(Self { stride, width, token_indices: Vec::new(), data: Vec::new() })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.token_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_indices.is_empty()
    }

    pub fn token_index(&self, entry: usize) -> usize {
        self.token_indices[entry]
    }

    pub fn token_indices(&self) -> &[usize] {
        &self.token_indices
    }

    pub fn kv(&self, entry: usize) -> &[T] {
        &self.data[entry * self.width..(entry + 1) * self.width]
    }

    /// Entry index of a stored token, if present.
    pub fn entry_of(&self, token_index: usize) -> Option<usize> {
        self.token_indices.binary_search(&token_index).ok()
    }

    /// Entries as a `len × width` matrix.
    pub fn as_matrix(&self) -> Matrix<T> {
        Matrix::from_vec(self.len(), self.width, self.data.clone()).expect("consistent storage")
    }

    /// Stores `kv` iff `token_index` is a multiple of the stride.
    pub fn maybe_append(&mut self, token_index: usize, kv: &[T]) -> Result<bool> {
        if let Some(&last) = self.token_indices.last() {
            if token_index <= last {
                return Err(Error::Ordering(format!(
                    "token {token_index} does not follow stored reference {last}"
                )));
            }
        }
        if kv.len() != self.width {
            return Err(Error::Shape(format!("reference of width {} in a set of width {}", kv.len(), self.width)));
        }
        if token_index % self.stride != 0 {
            return Ok(false);
        }
        self.token_indices.push(token_index);
        self.data.extend_from_slice(kv);
        Ok(true)
    }

    fn eligible(&self, exclusive_below: usize) -> usize {
        self.token_indices.partition_point(|&t| t < exclusive_below)
    }

    /// Up to `k` entries with token index below `exclusive_below`, nearest
    /// first by squared L2 distance, lower token index first on ties.
    pub fn topk(&self, query: &[T], k: usize, exclusive_below: usize) -> Vec<usize> {
        let n = self.eligible(exclusive_below);
        let mut cand: Vec<(T, usize)> = (0..n)
            .map(|e| {
                let d = self.kv(e).iter().zip(query).fold(T::zero(), |acc, (&r, &q)| {
                    let t = q - r;
                    acc + t * t
                });
                (d, e)
            })
            .collect();
        take_nearest(&mut cand, k)
    }

    /// Same contract as [`Self::topk`] for many queries, using the
    /// expansion-form distance matrix from [`batch_l2`].
    pub fn topk_batch(&self, queries: &Matrix<T>, k: usize, exclusive_below: &[usize]) -> Result<Vec<Vec<usize>>> {
        if queries.rows() != exclusive_below.len() {
            return Err(Error::Shape("one exclusive bound per query is required".into()));
        }
        let refs = self.as_matrix();
        let dist = batch_l2(queries, &refs)?;
        Ok((0..queries.rows())
            .map(|i| {
                let n = self.eligible(exclusive_below[i]);
                let mut cand: Vec<(T, usize)> = (0..n).map(|e| (dist.get(i, e), e)).collect();
                take_nearest(&mut cand, k)
            })
            .collect())
    }

    /// Arithmetic mean of the given entries; zero vector when empty.
    pub fn mean_reference(&self, entries: &[usize]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.width];
        if entries.is_empty() {
            return Ok(out);
        }
        for &e in entries {
            if e >= self.len() {
                return Err(Error::Index(format!("reference entry {e} of {}", self.len())));
            }
            for (o, &x) in out.iter_mut().zip(self.kv(e)) {
                *o = *o + x;
            }
        }
        let inv = T::c(entries.len() as f64);
        Ok(out.into_iter().map(|x| x / inv).collect())
    }
}

fn take_nearest<T: Real>(cand: &mut [(T, usize)], k: usize) -> Vec<usize> {
    cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    cand.iter().take(k).map(|&(_, e)| e).collect()
}

/// Squared distances `‖q‖² − 2qᵀr + ‖r‖²`, clamped at zero.
pub fn batch_l2<T: Real>(queries: &Matrix<T>, refs: &Matrix<T>) -> Result<Matrix<T>> {
    if queries.cols() != refs.cols() {
        return Err(Error::Shape(format!(
            "query width {} vs reference width {}",
            queries.cols(),
            refs.cols()
        )));
    }
    let qn: Vec<T> = (0..queries.rows()).map(|i| dot(queries.row(i), queries.row(i))).collect();
    let rn: Vec<T> = (0..refs.rows()).map(|j| dot(refs.row(j), refs.row(j))).collect();
    let two = T::c(2.0);
    Ok(Matrix::from_fn(queries.rows(), refs.rows(), |i, j| {
        let d = qn[i] - two * dot(queries.row(i), refs.row(j)) + rn[j];
        d.max(T::zero())
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_rules() {
        let mut s = ReferenceSet::<f32>::new(10, 2).unwrap();
        assert!(s.maybe_append(0, &[1.0, 2.0]).unwrap());
        assert!(!s.maybe_append(5, &[1.0, 2.0]).unwrap());
        assert!(matches!(s.maybe_append(0, &[0.0, 0.0]), Err(Error::Ordering(_))));
        let mut s = ReferenceSet::<f32>::new(10, 1).unwrap();
        for i in 0..100 {
            s.maybe_append(i, &[i as f32]).unwrap();
        }
        assert_eq!(s.len(), 10);
        assert!(s.token_indices().iter().all(|t| t % 10 == 0));
    }

    #[test]
    fn topk_tie_and_bounds() {
        let mut s = ReferenceSet::<f64>::new(1, 2).unwrap();
        s.maybe_append(0, &[1.0, 0.0]).unwrap();
        s.maybe_append(1, &[-1.0, 0.0]).unwrap();
        s.maybe_append(2, &[5.0, 5.0]).unwrap();
        assert_eq!(s.topk(&[0.0, 0.0], 2, 3), vec![0, 1]);
        assert_eq!(s.topk(&[0.0, 0.0], 5, 1), vec![0]);
        assert!(s.topk(&[0.0, 0.0], 3, 0).is_empty());
    }

    #[test]
    fn mean_reference_cases() {
        let mut s = ReferenceSet::<f64>::new(1, 2).unwrap();
        s.maybe_append(0, &[1.0, 3.0]).unwrap();
        s.maybe_append(1, &[3.0, 5.0]).unwrap();
        assert_eq!(s.mean_reference(&[0]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(s.mean_reference(&[]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(s.mean_reference(&[0, 1]).unwrap(), vec![2.0, 4.0]);
        assert!(matches!(s.mean_reference(&[7]), Err(Error::Index(_))));
    }

    #[test]
    fn batch_l2_small() {
        let q = Matrix::from_vec(1, 2, vec![0.0f64, 0.0]).unwrap();
        let r = Matrix::from_vec(1, 2, vec![3.0f64, 4.0]).unwrap();
        assert_eq!(batch_l2(&q, &r).unwrap().data(), &[25.0]);
        let d = batch_l2(&r, &r).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        let bad = Matrix::<f64>::zeros(1, 3);
        assert!(matches!(batch_l2(&q, &bad), Err(Error::Shape(_))));
    }
}
