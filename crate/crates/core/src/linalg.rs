//! Small dense linear algebra on [`Tensor`]s, backed by `nalgebra`.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2()?;
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(&[r, c], data).expect("shape from matrix")
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
///
/// Returns the eigenvalues and a `[n, n]` tensor whose columns are the
/// matching unit eigenvectors.
pub fn symmetric_eigen(sym: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (r, c) = sym.dims2()?;
    if r != c {
        return Err(Error::dim(format!("eigen needs a square matrix, got {r}x{c}")));
    }
    let m = to_matrix(sym)?;
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Tensor::zeros(&[r, r]);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..r {
            vecs.data_mut()[row * r + col] = eig.eigenvectors[(row, src)];
        }
    }
    Ok((values, vecs))
}

/// Population mean and covariance of the rows of `[n, d]`.
pub fn mean_covariance(rows: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, d) = rows.dims2()?;
    if n == 0 {
        return Err(Error::Stats("covariance of an empty set".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = rows.clone();
    for i in 0..n {
        for j in 0..d {
            centered.data_mut()[i * d + j] -= mean[j];
        }
    }
    let cov = centered
        .transpose2()?
        .matmul(&centered)?
        .scale(1.0 / n as f64);
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix. Negative
/// eigenvalues from round-off are clamped to zero.
pub fn sqrt_psd(sym: &Tensor) -> Result<Tensor> {
    let (vals, vecs) = symmetric_eigen(sym)?;
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let s = vals[j].max(0.0).sqrt();
        for i in 0..n {
            scaled.data_mut()[i * n + j] *= s;
        }
    }
    scaled.matmul(&vecs.transpose2()?)
}

/// Haar-distributed matrix with orthonormal columns, `[rows, cols]`.
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    if cols > rows {
        return Err(Error::config(
            "proj_dim",
            format!("cannot build {cols} orthonormal columns in dimension {rows}"),
        ));
    }
    let g = to_matrix(&Tensor::randn(&[rows, cols], rng))?;
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix makes the distribution uniform over the Stiefel manifold
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(from_matrix(&q))
}

/// `|A^T A - I|_F`.
pub fn orthonormality_defect(a: &Tensor) -> Result<f64> {
    let gram = a.transpose2()?.matmul(a)?;
    let n = gram.shape()[0];
    Ok(gram.zip_map(&Tensor::identity(n), |x, y| x - y)?.frobenius_norm())
}

/// Determinant of a square matrix.
pub fn determinant(a: &Tensor) -> Result<f64> {
    Ok(to_matrix(a)?.determinant())
}

/// Largest singular value by power iteration on `A^T A`.
pub fn operator_norm(a: &Tensor, iterations: usize) -> Result<f64> {
    let (_, c) = a.dims2()?;
    let ata = a.transpose2()?.matmul(a)?;
    let mut v = Tensor::ones(&[c, 1]);
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let w = ata.matmul(&v)?;
        let norm = w.frobenius_norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        lambda = norm / v.frobenius_norm();
        v = w.scale(1.0 / norm);
    }
    Ok(lambda.sqrt())
}
