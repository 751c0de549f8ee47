//! Penalties against feature collapse of the projected representation.
//!
//! * feature variance: hinge on the per-token standard deviation across
//!   channels,
//! * orthogonality: `|W^T W - I|_F^2` on the projection weights,
//! * covariance: squared off-diagonal channel covariance, correlation
//!   normalized by default.
//!
//! Variances use the population convention throughout.

use crate::autodiff::{Tape, Var};
use crate::config::{CovNorm, RegKind, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegConfig {
    pub kind: RegKind,
    pub gamma: f64,
    pub eps: f64,
    pub lambda_reg: f64,
    pub cov_norm: CovNorm,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            kind: RegKind::Var,
            gamma: 1.0,
            eps: 1e-5,
            lambda_reg: 1.0,
            cov_norm: CovNorm::Correlation,
        }
    }
}

impl RegConfig {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        RegConfig {
            kind: cfg.effective_reg(),
            gamma: cfg.gamma,
            eps: cfg.reg_eps,
            lambda_reg: cfg.lambda_reg,
            cov_norm: cfg.cov_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma", "must be positive"));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::config("lambda_reg", "must be non-negative"));
        }
        Ok(())
    }
}

fn dims3(z: &Var<'_>) -> Result<(usize, usize, usize)> {
    match z.shape()[..] {
        [b, l, d] => Ok((b, l, d)),
        ref s => Err(Error::dim(format!("expected [B, L, d], got {s:?}"))),
    }
}

/// Mean over tokens of `max(0, gamma - sqrt(Var_channels + eps))`.
pub fn l_var<'t>(z: Var<'t>, gamma: f64, eps: f64) -> Result<Var<'t>> {
    let (_, _, d) = dims3(&z)?;
    if d < 2 {
        return Err(Error::Stats(format!(
            "channel variance is degenerate for d = {d}"
        )));
    }
    let mean = z.mean_axis(2)?;
    let var = z.sub(&mean)?.square().mean_axis(2)?;
    let std = var.add_scalar(eps).sqrt();
    Ok(std.neg().add_scalar(gamma).relu().mean())
}

/// `|W^T W - I|_F^2`.
pub fn l_orth<'t>(w: Var<'t>) -> Result<Var<'t>> {
    let shape = w.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("expected [D, d] weights, got {shape:?}")));
    }
    let eye = w.tape().constant(Tensor::identity(shape[1]));
    let gram = w.transpose()?.matmul(&w)?;
    Ok(gram.sub(&eye)?.square().sum())
}

/// `(1/d) sum_{i != j} C_ij^2` over the pooled token vectors.
///
/// With [`CovNorm::Correlation`], `C_ij = Cov_ij / (s_i s_j + eps)`.
pub fn l_cov<'t>(z: Var<'t>, norm: CovNorm, eps: f64) -> Result<Var<'t>> {
    let (b, l, d) = dims3(&z)?;
    let n = b * l;
    if n < 2 {
        return Err(Error::Stats(format!(
            "covariance needs at least 2 token vectors, got {n}"
        )));
    }
    let rows = z.reshape(&[n, d])?;
    let centered = rows.sub(&rows.mean_axis(0)?)?;
    let cov = centered.transpose()?.matmul(&centered)?.scale(1.0 / n as f64);
    let c = match norm {
        CovNorm::Raw => cov,
        CovNorm::Correlation => {
            let std = centered.square().mean_axis(0)?.sqrt();
            let outer = std.transpose()?.matmul(&std)?;
            cov.div(&outer.add_scalar(eps))?
        }
    };
    let mut mask = Tensor::ones(&[d, d]);
    for i in 0..d {
        mask.data_mut()[i * d + i] = 0.0;
    }
    let mask = z.tape().constant(mask);
    Ok(c.square().mul(&mask)?.sum().scale(1.0 / d as f64))
}

/// Selected regularizer; [`RegKind::None`] yields a constant zero.
pub fn regularize<'t>(cfg: &RegConfig, tape: &'t Tape, z: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    cfg.validate()?;
    match cfg.kind {
        RegKind::Var => l_var(z, cfg.gamma, cfg.eps),
        RegKind::Orth => l_orth(w),
        RegKind::Cov => l_cov(z, cfg.cov_norm, cfg.eps),
        RegKind::None => Ok(tape.scalar(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthonormal;
    use crate::rng::seeded;

    fn value(t: Tensor, f: impl for<'a> Fn(Var<'a>) -> Result<Var<'a>>) -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(t);
        f(v).unwrap().item()
    }

    #[test]
    fn variance_constant_tokens() {
        let z = Tensor::full(&[2, 3, 4], 0.7);
        assert_eq!(value(z, |v| l_var(v, 1.0, 0.0)), 1.0);
    }

    #[test]
    fn variance_hand_values() {
        let z = Tensor::new(&[1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(value(z, |v| l_var(v, 1.0, 0.0)), 0.0);
        let z = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(value(z, |v| l_var(v, 1.0, 0.0)), 0.5);
    }

    #[test]
    fn variance_inactive_hinge() {
        let z = Tensor::new(&[1, 2, 2], vec![-3.0, 3.0, 5.0, -5.0]).unwrap();
        assert_eq!(value(z, |v| l_var(v, 1.0, 1e-5)), 0.0);
    }

    #[test]
    fn variance_needs_two_channels() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 2, 1]));
        assert!(matches!(l_var(z, 1.0, 1e-5), Err(Error::Stats(_))));
    }

    #[test]
    fn orthogonality_hand_values() {
        let q = random_orthonormal(7, 3, &mut seeded(1)).unwrap();
        assert!(value(q.clone(), l_orth) < 1e-24);
        let two = value(q.scale(2.0), l_orth);
        assert!((two - 27.0).abs() < 1e-10);
    }

    #[test]
    fn orthogonality_duplicated_column() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        // W^T W = [[1,1],[1,1]]: two off-diagonal ones
        assert_eq!(value(w, l_orth), 2.0);
    }

    #[test]
    fn covariance_duplicated_channel() {
        let mut rng = seeded(4);
        let base = Tensor::randn(&[1, 50, 1], &mut rng);
        let data: Vec<f64> = base.data().iter().flat_map(|&v| [v, v]).collect();
        let z = Tensor::new(&[1, 50, 2], data).unwrap();
        let loss = value(z, |v| l_cov(v, CovNorm::Correlation, 0.0));
        assert!((loss - 1.0).abs() < 1e-10, "{loss}");
    }

    #[test]
    fn covariance_decorrelated_is_zero() {
        // four token vectors with exactly orthogonal centered channels
        let z = Tensor::new(&[1, 4, 2], vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]).unwrap();
        assert!(value(z, |v| l_cov(v, CovNorm::Correlation, 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn covariance_needs_two_vectors() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 1, 3]));
        assert!(matches!(l_cov(z, CovNorm::Raw, 0.0), Err(Error::Stats(_))));
    }

    #[test]
    fn dispatch() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::full(&[1, 2, 2], 1.0));
        let w = tape.leaf(Tensor::identity(2).scale(2.0));
        let mut cfg = RegConfig {
            eps: 0.0,
            ..RegConfig::default()
        };
        assert_eq!(regularize(&cfg, &tape, z, w).unwrap().item(), 1.0);
        cfg.kind = RegKind::Orth;
        assert_eq!(regularize(&cfg, &tape, z, w).unwrap().item(), 18.0);
        cfg.kind = RegKind::None;
        let zero = regularize(&cfg, &tape, z, w).unwrap();
        assert_eq!(zero.item(), 0.0);
        assert!(!zero.requires_grad());
    }
}
