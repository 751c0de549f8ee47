//! Generation-time integrators and image-only classifier-free guidance.
//!
//! Generation runs from `t = 1` (noise) to `t = 0` on a uniform grid and
//! integrates both modalities jointly. With the linear interpolant the
//! velocity is `d x_t / dt`, so a step of size `dt > 0` towards the data is
//! `x <- x - dt v`.
//!
//! The stochastic sampler uses the reverse-time SDE with diffusion
//! `sigma(t) = t sigma0` and the score recovered from the velocity,
//! `score = -(x + (1 - t) v) / t`:
//!
//! `x <- x - dt (v + t sigma0^2 / 2 (x + (1 - t) v)) + t sigma0 sqrt(dt) xi`.

use rand::Rng;

use crate::autodiff::Tape;
use crate::backbone::Backbone;
use crate::config::{SamplerMethod, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// A conditional joint velocity field `(x, z, t, labels) -> (v_x, v_z)`.
pub trait VelocityField {
    /// `(L_img, C)` of the image branch.
    fn image_shape(&self) -> (usize, usize);
    /// `(L, d)` of the representation branch.
    fn rep_shape(&self) -> (usize, usize);
    /// Label used for the unconditional branch.
    fn null_label(&self) -> usize;
    fn velocity(&self, x: &Tensor, z: &Tensor, t: f64, labels: &[usize]) -> Result<(Tensor, Tensor)>;
}

impl VelocityField for Backbone {
    fn image_shape(&self) -> (usize, usize) {
        (self.dims.image_tokens(), self.dims.c_img)
    }

    fn rep_shape(&self) -> (usize, usize) {
        (self.dims.tokens, self.dims.proj_dim)
    }

    fn null_label(&self) -> usize {
        Backbone::null_label(self)
    }

    fn velocity(&self, x: &Tensor, z: &Tensor, t: f64, labels: &[usize]) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let z = tape.constant(z.clone());
        let tt = Tensor::full(&[labels.len()], t);
        let (vx, vz) = self.forward(&p, x, z, &tt, labels)?;
        let out = ((*vx.value()).clone(), (*vz.value()).clone());
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub method: SamplerMethod,
    /// Guidance weight; `1` disables guidance.
    pub cfg_scale: f64,
    /// Class to generate; `None` samples unconditionally.
    pub label: Option<usize>,
    pub seed: u64,
    /// Number of samples.
    pub n: usize,
    /// `sigma0` of the stochastic sampler.
    pub sde_sigma: f64,
}

impl SampleConfig {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        SampleConfig {
            steps: cfg.sample_steps,
            method: cfg.sample_method,
            cfg_scale: cfg.cfg_scale,
            label: None,
            seed: cfg.seed,
            n: cfg.n_gen,
            sde_sigma: cfg.sde_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sample_steps", "must be at least 1"));
        }
        if !(self.cfg_scale >= 1.0) {
            return Err(Error::config("cfg_scale", "must be at least 1"));
        }
        if !(self.sde_sigma >= 0.0) {
            return Err(Error::config("sde_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

/// Guided velocities: `v_x = v_x(null) + w (v_x(label) - v_x(null))`,
/// `v_z = v_z(label)`.
///
/// With `w = 1` the unconditional pass is skipped and both branches are the
/// conditional prediction.
pub fn guided_velocity<M: VelocityField + ?Sized>(
    model: &M,
    x: &Tensor,
    z: &Tensor,
    t: f64,
    labels: &[usize],
    w: f64,
) -> Result<(Tensor, Tensor)> {
    let (vx_cond, vz_cond) = model.velocity(x, z, t, labels)?;
    if w == 1.0 {
        return Ok((vx_cond, vz_cond));
    }
    let null = vec![model.null_label(); labels.len()];
    let (vx_null, _) = model.velocity(x, z, t, &null)?;
    let vx = vx_null.zip_map(&vx_cond, |u, c| u + w * (c - u))?;
    Ok((vx, vz_cond))
}

/// One reverse-time SDE step from `t` to `t - dt`.
///
/// `sigma0 = 0` is exactly the Euler step `x - dt v`.
pub fn euler_maruyama_step<R: Rng + ?Sized>(
    x: &Tensor,
    v: &Tensor,
    t: f64,
    dt: f64,
    sigma0: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("step size must be positive, got {dt}")));
    }
    if sigma0 == 0.0 {
        return x.zip_map(v, |xi, vi| xi - dt * vi);
    }
    let coef = t * sigma0 * sigma0 / 2.0;
    let noise_std = t * sigma0 * dt.sqrt();
    let xi = Tensor::randn(x.shape(), rng);
    let drift = x.zip_map(v, |xi, vi| vi + coef * (xi + (1.0 - t) * vi))?;
    let stepped = x.zip_map(&drift, |a, d| a - dt * d)?;
    stepped.zip_map(&xi, |a, n| a + noise_std * n)
}

fn axpy(x: &[Tensor], a: f64, v: &[Tensor]) -> Result<Vec<Tensor>> {
    x.iter()
        .zip(v)
        .map(|(xi, vi)| xi.zip_map(vi, |p, q| p + a * q))
        .collect()
}

/// Integrates `dx/dt = f(x, t)` from `t0` to `t1` in `steps` uniform steps.
///
/// `t1 < t0` integrates backwards. Only deterministic methods are accepted.
pub fn integrate_ode<F>(
    method: SamplerMethod,
    mut x: Vec<Tensor>,
    t0: f64,
    t1: f64,
    steps: usize,
    mut f: F,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor], f64) -> Result<Vec<Tensor>>,
{
    if steps == 0 {
        return Err(Error::config("sample_steps", "must be at least 1"));
    }
    let h = (t1 - t0) / steps as f64;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let v1 = f(&x, t)?;
        x = match method {
            SamplerMethod::Euler => axpy(&x, h, &v1)?,
            SamplerMethod::Heun => {
                let pred = axpy(&x, h, &v1)?;
                let v2 = f(&pred, t + h)?;
                let avg = axpy(&v1, 1.0, &v2)?;
                axpy(&x, 0.5 * h, &avg)?
            }
            SamplerMethod::EulerMaruyama => {
                return Err(Error::config(
                    "sample_method",
                    "the stochastic sampler needs a noise source; use sample()",
                ))
            }
        };
    }
    Ok(x)
}

/// Generates `cfg.n` joint samples, all with `cfg.label`.
pub fn sample<M: VelocityField + ?Sized>(model: &M, cfg: &SampleConfig) -> Result<(Tensor, Tensor)> {
    let labels = vec![cfg.label.unwrap_or_else(|| model.null_label()); cfg.n];
    sample_with_labels(model, cfg, &labels)
}

/// Generates one joint sample per entry of `labels`.
pub fn sample_with_labels<M: VelocityField + ?Sized>(
    model: &M,
    cfg: &SampleConfig,
    labels: &[usize],
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let n = labels.len();
    let (li, c) = model.image_shape();
    let (l, d) = model.rep_shape();
    let mut rng = rng::stream(cfg.seed, purpose::SAMPLE, 0);
    let x = Tensor::randn(&[n, li, c], &mut rng);
    let z = Tensor::randn(&[n, l, d], &mut rng);
    // guidance is meaningless for the unconditional branch itself
    let w = if labels.iter().all(|&y| y == model.null_label()) {
        1.0
    } else {
        cfg.cfg_scale
    };
    let dt = 1.0 / cfg.steps as f64;
    match cfg.method {
        SamplerMethod::EulerMaruyama => {
            let (mut x, mut z) = (x, z);
            for k in 0..cfg.steps {
                let t = 1.0 - k as f64 * dt;
                let (vx, vz) = guided_velocity(model, &x, &z, t, labels, w)?;
                x = euler_maruyama_step(&x, &vx, t, dt, cfg.sde_sigma, &mut rng)?;
                z = euler_maruyama_step(&z, &vz, t, dt, cfg.sde_sigma, &mut rng)?;
            }
            Ok((x, z))
        }
        method => {
            let out = integrate_ode(method, vec![x, z], 1.0, 0.0, cfg.steps, |s, t| {
                let (vx, vz) = guided_velocity(model, &s[0], &s[1], t, labels, w)?;
                Ok(vec![vx, vz])
            })?;
            let mut it = out.into_iter();
            Ok((it.next().expect("x"), it.next().expect("z")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// `v_x = a(label) x + label`, `v_z = z * label`.
    struct Stub;

    impl VelocityField for Stub {
        fn image_shape(&self) -> (usize, usize) {
            (2, 1)
        }
        fn rep_shape(&self) -> (usize, usize) {
            (2, 2)
        }
        fn null_label(&self) -> usize {
            9
        }
        fn velocity(&self, x: &Tensor, z: &Tensor, _t: f64, labels: &[usize]) -> Result<(Tensor, Tensor)> {
            let y = labels[0] as f64;
            Ok((x.map(|v| 0.5 * v + y), z.map(|v| v * y)))
        }
    }

    struct Constant;

    impl VelocityField for Constant {
        fn image_shape(&self) -> (usize, usize) {
            (1, 1)
        }
        fn rep_shape(&self) -> (usize, usize) {
            (1, 2)
        }
        fn null_label(&self) -> usize {
            0
        }
        fn velocity(&self, x: &Tensor, z: &Tensor, _t: f64, _l: &[usize]) -> Result<(Tensor, Tensor)> {
            Ok((x.map(|_| 0.25), z.map(|_| -1.5)))
        }
    }

    #[test]
    fn one_euler_step_constant_velocity() {
        let x1 = Tensor::from_vec(vec![1.0, -2.0]);
        let v = Tensor::from_vec(vec![0.5, 0.25]);
        let out = integrate_ode(SamplerMethod::Euler, vec![x1.clone()], 1.0, 0.0, 1, |_, _| {
            Ok(vec![v.clone()])
        })
        .unwrap();
        assert_eq!(out[0], x1.zip_map(&v, |a, b| a - b).unwrap());
    }

    #[test]
    fn constant_field_is_exact_for_all_methods() {
        for method in [SamplerMethod::Euler, SamplerMethod::Heun] {
            let cfg = SampleConfig {
                steps: 7,
                method,
                cfg_scale: 1.0,
                label: Some(1),
                seed: 3,
                n: 2,
                sde_sigma: 0.0,
            };
            let (x, z) = sample(&Constant, &cfg).unwrap();
            let mut rng = rng::stream(3, purpose::SAMPLE, 0);
            let x1 = Tensor::randn(&[2, 1, 1], &mut rng);
            let z1 = Tensor::randn(&[2, 1, 2], &mut rng);
            let ex = x1.map(|v| v - 0.25);
            let ez = z1.map(|v| v + 1.5);
            assert!(x.zip_map(&ex, |a, b| a - b).unwrap().max_abs() < 1e-12);
            assert!(z.zip_map(&ez, |a, b| a - b).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn heun_exponential_decay() {
        let x = Tensor::from_vec(vec![1.0, 3.0]);
        let out = integrate_ode(SamplerMethod::Heun, vec![x.clone()], 0.0, 1.0, 50, |s, _| {
            Ok(vec![s[0].scale(-1.0)])
        })
        .unwrap();
        for (got, x0) in out[0].data().iter().zip(x.data()) {
            let exact = x0 * (-1.0f64).exp();
            assert!(((got - exact) / exact).abs() <= 1e-3);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = SampleConfig {
            steps: 0,
            method: SamplerMethod::Euler,
            cfg_scale: 1.0,
            label: None,
            seed: 0,
            n: 1,
            sde_sigma: 1.0,
        };
        assert!(matches!(sample(&Stub, &cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_sigma_is_euler_bitwise() {
        let mut rng = seeded(1);
        let x = Tensor::randn(&[3, 2], &mut rng);
        let v = Tensor::randn(&[3, 2], &mut rng);
        let em = euler_maruyama_step(&x, &v, 0.6, 0.02, 0.0, &mut rng).unwrap();
        assert_eq!(em, x.zip_map(&v, |a, b| a - 0.02 * b).unwrap());
    }

    #[test]
    fn nonpositive_dt_rejected() {
        let x = Tensor::zeros(&[1]);
        let err = euler_maruyama_step(&x, &x, 0.5, 0.0, 1.0, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn guidance_hand_values() {
        let x = Tensor::from_vec(vec![2.0, -4.0]);
        let z = Tensor::from_vec(vec![1.0, 3.0]);
        let (vx, vz) = guided_velocity(&Stub, &x, &z, 0.5, &[2], 2.0).unwrap();
        // cond: 0.5 x + 2, null: 0.5 x + 9 -> null + 2 (cond - null) = 0.5 x - 5
        assert_eq!(vx.data(), &[-4.0, -7.0]);
        assert_eq!(vz.data(), &[2.0, 6.0]);
        let (vx1, vz1) = guided_velocity(&Stub, &x, &z, 0.5, &[2], 1.0).unwrap();
        assert_eq!(vx1.data(), &[3.0, 0.0]);
        assert_eq!(vz1, vz);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let cfg = SampleConfig {
            steps: 5,
            method: SamplerMethod::EulerMaruyama,
            cfg_scale: 1.8,
            label: Some(1),
            seed: 11,
            n: 3,
            sde_sigma: 1.0,
        };
        assert_eq!(sample(&Stub, &cfg).unwrap(), sample(&Stub, &cfg).unwrap());
    }
}
