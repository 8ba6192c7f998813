//! Prior-frame retrieval over keyframe global descriptors.
//!
//! Descriptors are centered, reduced with PCA fitted on the indexed keyframes,
//! L2-normalized, and stored in an exact k-d tree. No whitening is applied.
//!
//! PCA uses a dense symmetric eigensolver: on the `D × D` covariance when
//! there are more samples than dimensions, otherwise on the `n × n` Gram
//! matrix (the same nonzero spectrum, cheaper when `n < D`). Cost is
//! `O(min(n, D)³ + n·D·min(n, D))`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ann::KdTree;
use crate::error::{Error, Result};
use crate::format::binary;
use crate::map::{KeyframeId, VisualMap};

/// Default reduced dimension of global descriptors.
pub const DEFAULT_PCA_DIM: usize = 512;

/// Default number of prior frames retrieved per query.
pub const DEFAULT_NUM_PRIORS: usize = 10;

/// Projections shorter than this are rejected as degenerate.
pub const MIN_PROJECTION_NORM: f64 = 1e-12;

/// Linear projection onto the leading principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjector {
    mean: DVector<f64>,
    /// `D × d` with orthonormal columns, by descending explained variance.
    basis: DMatrix<f64>,
    variances: Vec<f64>,
}

impl PcaProjector {
    /// Fits the top `output_dim` principal components of `descriptors`.
    pub fn fit<R, T>(descriptors: &[R], output_dim: usize) -> Result<Self>
    where
        R: AsRef<[T]>,
        T: Copy + Into<f64>,
    {
        let n = descriptors.len();
        if n < 2 {
            return Err(Error::InsufficientSamples {
                required: 2,
                actual: n,
            });
        }
        let dim = descriptors[0].as_ref().len();
        if let Some(bad) = descriptors.iter().find(|d| d.as_ref().len() != dim) {
            return Err(Error::DimensionMismatch {
                context: "PCA input".into(),
                expected: dim,
                actual: bad.as_ref().len(),
            });
        }
        let max_dim = dim.min(n - 1);
        if output_dim == 0 || output_dim > max_dim {
            return Err(Error::invalid(
                "pca_dim",
                format!("{output_dim} not in 1..={max_dim} (input dim {dim}, {n} samples)"),
            ));
        }

        let mut mean = DVector::zeros(dim);
        for d in descriptors {
            for (m, &v) in mean.iter_mut().zip(d.as_ref()) {
                *m += v.into();
            }
        }
        mean /= n as f64;
        let centered = DMatrix::from_fn(n, dim, |i, j| {
            descriptors[i].as_ref()[j].into() - mean[j]
        });
        let scale = 1.0 / (n - 1) as f64;

        let (mut basis, variances) = if dim <= n {
            let cov = centered.tr_mul(&centered) * scale;
            let (vectors, values) = sorted_eigen(cov, output_dim);
            (vectors, values)
        } else {
            let gram = (&centered * centered.transpose()) * scale;
            let (vectors, values) = sorted_eigen(gram, output_dim);
            // u = Xᵀv / sqrt((n-1)λ); re-orthonormalize to absorb rounding.
            let mut basis = centered.tr_mul(&vectors);
            for (j, &lambda) in values.iter().enumerate() {
                let norm = (lambda.max(0.0) / scale).sqrt();
                if norm > 0.0 {
                    basis.column_mut(j).unscale_mut(norm);
                }
            }
            orthonormalize_columns(&mut basis);
            (basis, values)
        };

        for mut col in basis.column_iter_mut() {
            let (pivot, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |(bi, bv), (i, v)| {
                    if v.abs() > bv {
                        (i, v.abs())
                    } else {
                        (bi, bv)
                    }
                });
            if col[pivot] < 0.0 {
                col.neg_mut();
            }
        }

        Ok(Self {
            mean,
            basis,
            variances: variances.into_iter().map(|v| v.max(0.0)).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn explained_variances(&self) -> &[f64] {
        &self.variances
    }

    /// `basisᵀ (x − mean)` without normalization.
    pub fn project_raw<T: Copy + Into<f64>>(&self, descriptor: &[T]) -> Result<Vec<f64>> {
        if descriptor.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "global descriptor".into(),
                expected: self.input_dim(),
                actual: descriptor.len(),
            });
        }
        let centered: Vec<f64> = descriptor
            .iter()
            .zip(self.mean.iter())
            .map(|(&x, m)| x.into() - m)
            .collect();
        Ok(self
            .basis
            .column_iter()
            .map(|col| col.iter().zip(&centered).map(|(b, c)| b * c).sum())
            .collect())
    }

    /// Projected and L2-normalized descriptor.
    pub fn project<T: Copy + Into<f64>>(&self, descriptor: &[T]) -> Result<Vec<f64>> {
        let mut y = self.project_raw(descriptor)?;
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_PROJECTION_NORM) {
            return Err(Error::DegenerateProjection { norm });
        }
        y.iter_mut().for_each(|v| *v /= norm);
        Ok(y)
    }

    /// Writes the projector as an `f64` binary matrix: the mean, then one row
    /// per basis column, then the explained variances.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = Vec::with_capacity(self.input_dim() * (self.output_dim() + 1) + self.output_dim());
        data.extend(self.mean.iter());
        data.extend(self.basis.iter());
        data.extend(&self.variances);
        binary::write_f64_matrix(path, self.input_dim(), self.output_dim(), &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (dim, count, data) = binary::read_f64_matrix(path)?;
        if dim == 0 || count == 0 || data.len() != dim + dim * count + count {
            return Err(Error::BinaryFormat {
                path: path.to_path_buf(),
                message: format!("projector payload of {} values does not fit {dim} x {count}", data.len()),
            });
        }
        let mean = DVector::from_column_slice(&data[..dim]);
        let basis = DMatrix::from_column_slice(dim, count, &data[dim..dim + dim * count]);
        let variances = data[dim + dim * count..].to_vec();
        Ok(Self {
            mean,
            basis,
            variances,
        })
    }
}

/// Top-`k` eigenpairs of a symmetric matrix, by descending eigenvalue.
fn sorted_eigen(matrix: DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(matrix);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), k, |i, j| {
        eig.eigenvectors[(i, order[j])]
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    (vectors, values)
}

/// Two passes of modified Gram-Schmidt, left to right.
fn orthonormalize_columns(m: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for j in 0..m.ncols() {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let prev = m.column(i).clone_owned();
                m.column_mut(j).axpy(-proj, &prev, 1.0);
            }
            let norm = m.column(j).norm();
            if norm > 0.0 {
                m.column_mut(j).unscale_mut(norm);
            }
        }
    }
}

/// PCA projector plus a k-d tree over the projected keyframe descriptors.
#[derive(Debug, Clone)]
pub struct GlobalIndex {
    projector: PcaProjector,
    tree: KdTree,
}

impl GlobalIndex {
    /// Fits PCA on the map's keyframe descriptors and indexes every keyframe.
    pub fn build(map: &VisualMap, output_dim: usize) -> Result<Self> {
        let descriptors: Vec<&[f32]> = map
            .keyframes()
            .iter()
            .map(|kf| kf.global_descriptor.as_slice())
            .collect();
        let projector = PcaProjector::fit(&descriptors, output_dim)?;
        Self::with_projector(map, projector)
    }

    /// Indexes the map's keyframes with an existing projector.
    pub fn with_projector(map: &VisualMap, projector: PcaProjector) -> Result<Self> {
        if projector.input_dim() != map.global_dim() {
            return Err(Error::DimensionMismatch {
                context: "projector input vs map global descriptors".into(),
                expected: map.global_dim(),
                actual: projector.input_dim(),
            });
        }
        let mut ids = Vec::with_capacity(map.num_keyframes());
        let mut data = Vec::with_capacity(map.num_keyframes() * projector.output_dim());
        for kf in map.keyframes() {
            ids.push(kf.id.0);
            data.extend(projector.project(&kf.global_descriptor)?);
        }
        let tree = KdTree::from_flat(projector.output_dim(), ids, data)?;
        Ok(Self { projector, tree })
    }

    pub fn projector(&self) -> &PcaProjector {
        &self.projector
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Stored projected descriptor of a keyframe.
    pub fn indexed_vector(&self, id: KeyframeId) -> Option<&[f64]> {
        self.tree.vector_of(id.0)
    }

    /// The `n` keyframes nearest to the query in the projected space, with
    /// squared distances, ascending. Exact search.
    pub fn retrieve_with_distances<T: Copy + Into<f64>>(
        &self,
        query_descriptor: &[T],
        n: usize,
    ) -> Result<Vec<(KeyframeId, f64)>> {
        if n < 1 {
            return Err(Error::invalid("num_priors", "must be at least 1"));
        }
        let q = self.projector.project(query_descriptor)?;
        Ok(self
            .tree
            .knn(&q, n, 0.0)?
            .into_iter()
            .map(|h| (KeyframeId(h.id), h.sq_dist))
            .collect())
    }

    /// Prior frames for a query descriptor, nearest first.
    pub fn retrieve_priors<T: Copy + Into<f64>>(
        &self,
        query_descriptor: &[T],
        n: usize,
    ) -> Result<Vec<KeyframeId>> {
        Ok(self
            .retrieve_with_distances(query_descriptor, n)?
            .into_iter()
            .map(|(id, _)| id)
            .collect())
    }
}
