//! Two-dimensional principal-component projection of feature vectors.

use gencond_tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Principal axes fitted on a reference set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit vector per output axis.
    pub components: Vec<Vec<f64>>,
    /// Variance of the fitted rows along each component, decreasing.
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits `dims` components on the rows of `x` (`[n, d]`). Each component
    /// is signed so that its largest-magnitude entry is positive.
    pub fn fit(x: &Tensor, dims: usize) -> Result<Self> {
        if x.ndim() != 2 {
            return Err(Error::Projection(format!("expected [n, d] features, got {:?}", x.shape())));
        }
        let (n, d) = (x.dim(0), x.dim(1));
        if d < dims {
            return Err(Error::Projection(format!("{d} feature dims cannot give {dims} components")));
        }
        if n < 2 {
            return Err(Error::Projection("need at least 2 rows".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
        // Eigen-decompose whichever Gram matrix is smaller.
        let (vectors, values): (Vec<Vec<f64>>, Vec<f64>) = if d <= n {
            let cov = centered.transpose() * &centered / n as f64;
            let eig = SymmetricEigen::new(cov);
            let order = descending(eig.eigenvalues.as_slice());
            order
                .iter()
                .take(dims)
                .map(|&k| (eig.eigenvectors.column(k).iter().copied().collect(), eig.eigenvalues[k].max(0.0)))
                .unzip()
        } else {
            let gram = &centered * centered.transpose() / n as f64;
            let eig = SymmetricEigen::new(gram);
            let order = descending(eig.eigenvalues.as_slice());
            order
                .iter()
                .take(dims)
                .map(|&k| {
                    let u = eig.eigenvectors.column(k);
                    let v = centered.transpose() * u;
                    let norm = v.norm();
                    let v: Vec<f64> = if norm > 0.0 {
                        v.iter().map(|e| e / norm).collect()
                    } else {
                        vec![0.0; d]
                    };
                    (v, eig.eigenvalues[k].max(0.0))
                })
                .unzip()
        };
        let components = vectors.into_iter().map(fix_sign).collect();
        Ok(Self {
            mean,
            components,
            variances: values,
        })
    }

    /// Projects rows of `x` onto the fitted axes, `[n, dims]`.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.dim(1) != self.mean.len() {
            return Err(Error::Projection(format!(
                "expected [n, {}] features, got {:?}",
                self.mean.len(),
                x.shape()
            )));
        }
        let n = x.dim(0);
        let k = self.components.len();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = x.row(i);
            for c in &self.components {
                out.push(row.iter().zip(&self.mean).zip(c).map(|((v, m), w)| (v - m) * w).sum());
            }
        }
        Ok(Tensor::new([n, k], out))
    }
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

fn fix_sign(mut v: Vec<f64>) -> Vec<f64> {
    let lead = v
        .iter()
        .copied()
        .fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
    if lead < 0.0 {
        v.iter_mut().for_each(|e| *e = -*e);
    }
    v
}
