use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{l2_normalize, Scalar, Tensor};

use super::layer::VLAD_EPS;

/// Default regulariser added to each eigenvalue before whitening.
pub const PCA_EPS: f64 = 1e-8;

/// Mean-centred projection onto principal directions scaled to unit
/// variance, followed by L2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaWhitening<T: Scalar> {
    pub mean: Vec<T>,
    /// Row-major `out_dim × in_dim`.
    pub proj: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Variances of the retained components, descending.
    pub variances: Vec<f64>,
}

/// Fits on `m` row-major samples of `dim` values each.
///
/// Covariance uses the `m − 1` normaliser. When `m < dim` the eigenproblem is
/// solved on the `m × m` Gram matrix instead. Each direction's sign is fixed
/// so that its largest-magnitude component is positive.
pub fn fit_pca_whitening<T: Scalar>(
    samples: &[T],
    dim: usize,
    out_dim: usize,
    eps_pca: f64,
) -> Result<PcaWhitening<T>> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(shape_err!("{} values are not whole {dim}-vectors", samples.len()));
    }
    let m = samples.len() / dim;
    if out_dim == 0 || m <= out_dim || out_dim > dim {
        return Err(Error::Config(format!(
            "PCA to {out_dim} dims needs more than {out_dim} samples of dim >= {out_dim}; got {m} of dim {dim}"
        )));
    }
    let x = DMatrix::<f64>::from_row_iterator(m, dim, samples.iter().map(|v| v.as_f64()));
    let mean = x.row_mean();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    let denom = (m - 1) as f64;

    let (values, vectors) = if m < dim {
        let gram = &xc * xc.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let mut dirs = DMatrix::<f64>::zeros(dim, out_dim);
        let mut vals = Vec::with_capacity(out_dim);
        for (col, &idx) in order.iter().take(out_dim).enumerate() {
            let lambda = eig.eigenvalues[idx].max(0.0);
            let v = xc.transpose() * eig.eigenvectors.column(idx);
            let norm = v.norm();
            if norm > 0.0 {
                dirs.set_column(col, &(v / norm));
            }
            vals.push(lambda / denom);
        }
        (vals, dirs)
    } else {
        let cov = xc.transpose() * &xc / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        let mut dirs = DMatrix::<f64>::zeros(dim, out_dim);
        let mut vals = Vec::with_capacity(out_dim);
        for (col, &idx) in order.iter().take(out_dim).enumerate() {
            dirs.set_column(col, &eig.eigenvectors.column(idx));
            vals.push(eig.eigenvalues[idx].max(0.0));
        }
        (vals, dirs)
    };

    let top = values.first().copied().unwrap_or(0.0);
    if let Some(pos) = values.iter().position(|&l| l <= top * 1e-12) {
        return Err(Error::Numerical(format!(
            "PCA output dimension {out_dim} exceeds the data rank {pos}"
        )));
    }

    let mut proj = Vec::with_capacity(out_dim * dim);
    for (col, &lambda) in values.iter().enumerate() {
        let v = vectors.column(col);
        let pivot = v.iter().fold(0.0f64, |acc, &e| if e.abs() > acc.abs() { e } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / (lambda + eps_pca).sqrt();
        proj.extend(v.iter().map(|&e| T::from_f64(e * scale)));
    }
    Ok(PcaWhitening {
        mean: mean.iter().map(|&v| T::from_f64(v)).collect(),
        proj,
        in_dim: dim,
        out_dim,
        variances: values,
    })
}

fn descending(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

impl<T: Scalar> PcaWhitening<T> {
    /// `proj · (v − μ)` without the final normalisation.
    pub fn project(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.in_dim {
            return Err(shape_err!(
                "PCA expects {} values, got {}",
                self.in_dim,
                v.len()
            ));
        }
        let centred: Vec<T> = v.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        Ok(self
            .proj
            .chunks(self.in_dim)
            .map(|row| row.iter().zip(&centred).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    pub fn mean_tensor(&self) -> Tensor<T> {
        Tensor::new([1, 1, 1, self.in_dim], self.mean.clone()).expect("mean shape")
    }

    pub fn proj_tensor(&self) -> Tensor<T> {
        Tensor::new([1, 1, self.out_dim, self.in_dim], self.proj.clone()).expect("proj shape")
    }

    pub fn from_tensors(mean: &Tensor<T>, proj: &Tensor<T>) -> Result<Self> {
        let in_dim = mean.len();
        if in_dim == 0 || proj.len() % in_dim != 0 {
            return Err(shape_err!(
                "PCA mean {:?} with projection {:?}",
                mean.shape(),
                proj.shape()
            ));
        }
        Ok(Self {
            mean: mean.data().to_vec(),
            proj: proj.data().to_vec(),
            in_dim,
            out_dim: proj.len() / in_dim,
            variances: Vec::new(),
        })
    }
}

/// Projects `v` with `pw` and L2-normalises the result.
pub fn apply_descriptor_reduction<T: Scalar>(v: &[T], pw: &PcaWhitening<T>) -> Result<Vec<T>> {
    Ok(l2_normalize(&pw.project(v)?, T::from_f64(VLAD_EPS)))
}
