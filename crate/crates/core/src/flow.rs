//! Coupled linear interpolation and the joint velocity objective.
//!
//! Both modalities share one `t` per sample:
//! `x_t = (1 - t) x0 + t eps_x` and `z_t = (1 - t) z0 + t eps_z`.
//! The regression targets are `eps - clean`. The clean representation
//! target is wrapped in a stop-gradient unless the `no_sg` ablation asks
//! otherwise, so the projection only learns through the noisy input path.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::TimeSampler;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Noisy inputs of one training step.
#[derive(Debug)]
pub struct NoisyPair<'t> {
    /// `[B, L_img, C]`; carries no gradient.
    pub x_t: Tensor,
    /// `[B, L, d]`; differentiable w.r.t. the projection.
    pub z_t: Var<'t>,
    /// `[B]`
    pub t: Tensor,
    pub eps_x: Tensor,
    pub eps_z: Tensor,
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_image: f64,
    pub l_rep: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lambda_z: f64,
    pub lambda_reg: f64,
}

impl LossBreakdown {
    pub fn new(l_image: f64, l_rep: f64, l_reg: f64, lambda_z: f64, lambda_reg: f64) -> Self {
        LossBreakdown {
            l_image,
            l_rep,
            l_reg,
            total: l_image + lambda_z * l_rep + lambda_reg * l_reg,
            lambda_z,
            lambda_reg,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_image, self.l_rep, self.l_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_t(t: &Tensor) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(format!("t = {bad} lies outside [0, 1]")));
    }
    Ok(())
}

/// Per-sample `(1 - t)` reshaped to broadcast over `[B, ..]`.
fn one_minus_t(t: &Tensor, ndim: usize) -> Result<Tensor> {
    let mut shape = vec![1; ndim];
    shape[0] = t.len();
    t.map(|v| 1.0 - v).reshape(&shape)
}

/// `(1 - t) clean + t noise` with one `t` per leading index.
pub fn mix(clean: &Tensor, noise: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_t(t)?;
    if clean.shape() != noise.shape() {
        return Err(Error::dim(format!(
            "clean {:?} and noise {:?} differ",
            clean.shape(),
            noise.shape()
        )));
    }
    let b = *clean.shape().first().ok_or_else(|| Error::dim("mix on scalar"))?;
    if t.len() != b {
        return Err(Error::dim(format!("{} times for batch of {b}", t.len())));
    }
    let inner = clean.len() / b.max(1);
    let data = clean
        .data()
        .iter()
        .zip(noise.data())
        .enumerate()
        .map(|(i, (&c, &e))| {
            let ti = t.data()[i / inner];
            (1.0 - ti) * c + ti * e
        })
        .collect();
    Tensor::new(clean.shape(), data)
}

/// Draws fresh Gaussian noise and interpolates both modalities.
pub fn interpolate<'t, R: Rng + ?Sized>(
    x0: &Tensor,
    z0_tilde: Var<'t>,
    t: &Tensor,
    rng: &mut R,
) -> Result<NoisyPair<'t>> {
    let eps_x = Tensor::randn(x0.shape(), rng);
    let eps_z = Tensor::randn(&z0_tilde.shape(), rng);
    interpolate_with(x0, z0_tilde, t, eps_x, eps_z)
}

/// Interpolation with caller-provided noise.
pub fn interpolate_with<'t>(
    x0: &Tensor,
    z0_tilde: Var<'t>,
    t: &Tensor,
    eps_x: Tensor,
    eps_z: Tensor,
) -> Result<NoisyPair<'t>> {
    check_t(t)?;
    let x_t = mix(x0, &eps_x, t)?;
    let z_shape = z0_tilde.shape();
    if z_shape != eps_z.shape() {
        return Err(Error::dim("representation noise shape mismatch"));
    }
    let tape = z0_tilde.tape();
    let one_minus = one_minus_t(t, z_shape.len())?;
    let noise_part = tape.constant(mix(&Tensor::zeros(&z_shape), &eps_z, t)?);
    let z_t = z0_tilde.mul(&tape.constant(one_minus))?.add(&noise_part)?;
    Ok(NoisyPair {
        x_t,
        z_t,
        t: t.clone(),
        eps_x,
        eps_z,
    })
}

/// Training times: uniform on `[0, 1]` or logistic of a standard normal.
pub fn sample_t<R: Rng + ?Sized>(b: usize, sampler: TimeSampler, rng: &mut R) -> Tensor {
    let data = (0..b)
        .map(|_| match sampler {
            TimeSampler::Uniform => rng.random::<f64>(),
            TimeSampler::LogitNormal => {
                let n: f64 = rng.sample(StandardNormal);
                1.0 / (1.0 + (-n).exp())
            }
        })
        .collect();
    Tensor::from_vec(data)
}

/// Image and representation velocity losses of one step.
pub struct JointLoss<'t> {
    pub l_image: Var<'t>,
    pub l_rep: Var<'t>,
}

/// Mean squared velocity errors.
///
/// `L_image = mean((v_x - (eps_x - x0))^2)` and
/// `L_rep = mean((v_z - (eps_z - sg(z0)))^2)`; with `stop_grad = false`
/// the clean target stays differentiable.
pub fn joint_loss<'t>(
    v_x: Var<'t>,
    v_z: Var<'t>,
    pair: &NoisyPair<'t>,
    x0: &Tensor,
    z0_tilde: Var<'t>,
    stop_grad: bool,
) -> Result<JointLoss<'t>> {
    if v_x.shape() != x0.shape() {
        return Err(Error::dim(format!(
            "image velocity {:?} vs target {:?}",
            v_x.shape(),
            x0.shape()
        )));
    }
    if v_z.shape() != z0_tilde.shape() {
        return Err(Error::dim(format!(
            "representation velocity {:?} vs target {:?}",
            v_z.shape(),
            z0_tilde.shape()
        )));
    }
    let tape = v_x.tape();
    let target_x = tape.constant(pair.eps_x.zip_map(x0, |e, c| e - c)?);
    let l_image = v_x.sub(&target_x)?.square().mean();

    let clean = if stop_grad {
        z0_tilde.stop_gradient()
    } else {
        z0_tilde
    };
    let target_z = tape.constant(pair.eps_z.clone()).sub(&clean)?;
    let l_rep = v_z.sub(&target_z)?.square().mean();
    Ok(JointLoss { l_image, l_rep })
}

/// `L_image + lambda_z L_rep + lambda_reg L_reg` on the tape.
pub fn total_loss<'t>(
    terms: &JointLoss<'t>,
    l_reg: Var<'t>,
    lambda_z: f64,
    lambda_reg: f64,
) -> Result<Var<'t>> {
    terms
        .l_image
        .add(&terms.l_rep.scale(lambda_z))?
        .add(&l_reg.scale(lambda_reg))
}
