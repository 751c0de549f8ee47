//! Learnable linear projection of frozen features followed by affine-free
//! batch normalization.
//!
//! Training mode standardizes each output channel with the batch statistics
//! (pooled over batch and token axes by default) and folds them into an
//! exponential moving average. Evaluation mode uses the running estimates,
//! so generation does not depend on the batch size. There is no learnable
//! scale or shift.
//!
//! The running variance stores the *regularized* variance `var + eps`, so
//! evaluation divides by `sqrt(running_var)` directly and the initial state
//! (`mean = 0`, `var = 1`) is an exact identity.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// How batch normalization behaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; caller folds them into the running estimates.
    Train,
    /// Running statistics.
    Eval,
    /// No normalization at all (ablation).
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionState {
    /// `[D, d]`
    pub w: Tensor,
    /// `[d]`, or `[L, d]` when statistics are not pooled over tokens.
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub pool_tokens: bool,
}

/// Statistics of one training batch, population convention.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl ProjectionState {
    /// Random orthonormal `W`, zero mean, unit variance.
    pub fn init(d_feat: usize, d: usize, seed: u64) -> Result<Self> {
        if d > d_feat {
            return Err(Error::config(
                "proj_dim",
                format!("projection width {d} exceeds feature dimension {d_feat}"),
            ));
        }
        if d == 0 {
            return Err(Error::config("proj_dim", "projection width must be positive"));
        }
        let mut rng = rng::stream(seed, purpose::PROJECTION, 0);
        let w = linalg::random_orthonormal(d_feat, d, &mut rng)?;
        Ok(ProjectionState {
            w,
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::ones(&[d]),
            momentum: 0.9,
            eps: 1e-10,
            pool_tokens: true,
        })
    }

    /// Adjusts the batch-norm settings. Unpooled statistics are tracked per
    /// token position, which needs the token count.
    pub fn with_bn(mut self, momentum: f64, eps: f64, pool_tokens: bool, tokens: usize) -> Self {
        let d = self.out_dim();
        self.momentum = momentum;
        self.eps = eps;
        self.pool_tokens = pool_tokens;
        let shape: Vec<usize> = if pool_tokens { vec![d] } else { vec![tokens, d] };
        self.running_mean = Tensor::zeros(&shape);
        self.running_var = Tensor::ones(&shape);
        self
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Records `BN(z0 W)` on `tape` using the given handle for `W`.
    ///
    /// `z0` is `[B, L, D]`; the result is `[B, L, d]`. In [`BnMode::Train`]
    /// the batch statistics are returned for [`ProjectionState::update_running`].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        w: Var<'t>,
        z0: &Tensor,
        mode: BnMode,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let (b, l, d_feat) = match z0.shape() {
            &[b, l, d] => (b, l, d),
            s => return Err(Error::dim(format!("projection expects [B, L, D], got {s:?}"))),
        };
        if d_feat != self.in_dim() {
            return Err(Error::dim(format!(
                "projection expects D = {}, got {d_feat}",
                self.in_dim()
            )));
        }
        let d = self.out_dim();
        let y = tape.constant(z0.clone()).matmul(&w)?;
        match mode {
            BnMode::Off => Ok((y, None)),
            BnMode::Eval => {
                let shape = if self.pool_tokens { vec![d] } else { vec![l, d] };
                let mean = tape.constant(self.running_mean.reshape(&shape)?);
                let std = tape.constant(self.running_var.map(f64::sqrt).reshape(&shape)?);
                Ok((y.sub(&mean)?.div(&std)?, None))
            }
            BnMode::Train => {
                let (stat_view, n) = if self.pool_tokens {
                    (y.reshape(&[b * l, d])?, b * l)
                } else {
                    (y.clone(), b)
                };
                if n < 2 {
                    return Err(Error::Stats(format!(
                        "batch normalization needs at least 2 vectors per statistic, got {n}"
                    )));
                }
                let mean = stat_view.mean_axis(0)?;
                let centered = stat_view.sub(&mean)?;
                let var = centered.square().mean_axis(0)?;
                let out = centered.div(&var.add_scalar(self.eps).sqrt())?;
                let out = out.reshape(&[b, l, d])?;
                let stat_shape = if self.pool_tokens { vec![d] } else { vec![l, d] };
                let stats = BatchStats {
                    mean: mean.value().reshape(&stat_shape)?,
                    var: var.value().reshape(&stat_shape)?,
                };
                Ok((out, Some(stats)))
            }
        }
    }

    /// `running <- (1 - m) * batch + m * running`.
    pub fn update_running(&mut self, stats: &BatchStats) -> Result<()> {
        let m = self.momentum;
        let eps = self.eps;
        self.running_mean = stats
            .mean
            .zip_map(&self.running_mean, |b, r| (1.0 - m) * b + m * r)?;
        self.running_var = stats
            .var
            .zip_map(&self.running_var, |b, r| (1.0 - m) * (b + eps) + m * r)?;
        Ok(())
    }

    /// Value-level projection. Training mode also updates the running
    /// statistics.
    pub fn project(&mut self, z0: &Tensor, training: bool) -> Result<Tensor> {
        let tape = Tape::new();
        let w = tape.constant(self.w.clone());
        let mode = if training { BnMode::Train } else { BnMode::Eval };
        let (out, stats) = self.forward(&tape, w, z0, mode)?;
        if let Some(stats) = stats {
            self.update_running(&stats)?;
        }
        let value = (*out.value()).clone();
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn z0(seed: u64) -> Tensor {
        Tensor::randn(&[3, 4, 10], &mut seeded(seed))
    }

    fn channel_moments(out: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let d = *out.shape().last().unwrap();
        let rows = out.flatten_rows().unwrap();
        let n = rows.shape()[0] as f64;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..rows.shape()[0] {
            for j in 0..d {
                mean[j] += rows.at2(r, j) / n;
            }
        }
        for r in 0..rows.shape()[0] {
            for j in 0..d {
                var[j] += (rows.at2(r, j) - mean[j]).powi(2) / n;
            }
        }
        (mean, var)
    }

    #[test]
    fn init_is_orthonormal() {
        let s = ProjectionState::init(10, 4, 1).unwrap();
        assert!(linalg::orthonormality_defect(&s.w).unwrap() <= 1e-8);
        assert_eq!(s.running_mean.data(), &[0.0; 4]);
        assert_eq!(s.running_var.data(), &[1.0; 4]);
    }

    #[test]
    fn square_init_has_unit_determinant() {
        let s = ProjectionState::init(6, 6, 2).unwrap();
        let det = linalg::determinant(&s.w).unwrap();
        assert!((det.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn seeds_differ() {
        let a = ProjectionState::init(10, 4, 1).unwrap();
        let b = ProjectionState::init(10, 4, 2).unwrap();
        assert!(a.w.zip_map(&b.w, |x, y| x - y).unwrap().frobenius_norm() > 0.0);
    }

    #[test]
    fn too_wide_rejected() {
        assert!(matches!(ProjectionState::init(4, 5, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn training_output_is_standardized() {
        let mut s = ProjectionState::init(10, 4, 3).unwrap();
        let out = s.project(&z0(5), true).unwrap();
        let (mean, var) = channel_moments(&out);
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() <= 1e-10, "{m}");
            assert!((v - 1.0).abs() <= 1e-6, "{v}");
        }
    }

    #[test]
    fn eval_with_initial_stats_is_plain_product() {
        let mut s = ProjectionState::init(10, 4, 3).unwrap();
        let z = z0(6);
        let out = s.project(&z, false).unwrap();
        assert_eq!(out, z.matmul(&s.w).unwrap());
    }

    #[test]
    fn ema_update_matches_hand_formula() {
        let mut s = ProjectionState::init(10, 4, 3).unwrap();
        s.running_mean = Tensor::from_vec(vec![0.5, -0.5, 1.0, 2.0]);
        let old = s.running_mean.clone();
        let z = z0(7);
        let y = z.matmul(&s.w).unwrap().flatten_rows().unwrap();
        let n = y.shape()[0] as f64;
        let batch_mean: Vec<f64> = (0..4)
            .map(|j| (0..y.shape()[0]).map(|r| y.at2(r, j)).sum::<f64>() / n)
            .collect();
        s.project(&z, true).unwrap();
        for j in 0..4 {
            let expected = 0.1 * batch_mean[j] + 0.9 * old.data()[j];
            assert!((s.running_mean.data()[j] - expected).abs() < 1e-14);
        }
        assert!(s.running_var.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn single_vector_batch_rejected() {
        let mut s = ProjectionState::init(10, 4, 3).unwrap();
        let z = Tensor::zeros(&[1, 1, 10]);
        assert!(matches!(s.project(&z, true), Err(Error::Stats(_))));
    }

    #[test]
    fn unpooled_statistics_per_token() {
        let mut s = ProjectionState::init(10, 4, 3).unwrap().with_bn(0.9, 1e-10, false, 4);
        let out = s.project(&z0(8), true).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4]);
        assert_eq!(s.running_mean.shape(), &[4, 4]);
        let eval = s.project(&z0(8), false).unwrap();
        assert_eq!(eval.shape(), &[3, 4, 4]);
    }

    #[test]
    fn scale_invariance_in_training_mode() {
        let base = ProjectionState::init(10, 4, 9).unwrap();
        let z = z0(10);
        let reference = base.clone().project(&z, true).unwrap();
        for c in [0.1, 10.0] {
            let mut s = base.clone();
            s.w = s.w.scale(c);
            let out = s.project(&z, true).unwrap();
            let diff = out.zip_map(&reference, |a, b| a - b).unwrap().max_abs();
            assert!(diff <= 1e-6, "c = {c}: {diff}");
        }
    }
}
