//! Central finite differences for checking tape gradients.
//!
//! These routines only ever evaluate the forward function, so they stay
//! independent of the backward pass they are used to audit.
//!
//! [`check_loss_terms`] audits every term of the training objective: the
//! projection gradient entry by entry, the denoiser gradient along random
//! directions. The finite-difference side of the representation loss keeps
//! its clean target at the unperturbed projection, which is what the
//! stop-gradient means.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, Dims};
use crate::config::{CovNorm, Mode, TrainConfig};
use crate::error::Result;
use crate::flow;
use crate::params::{Bound, ParamStore};
use crate::projection::{BnMode, ProjectionState};
use crate::regularizers::{l_cov, l_orth, l_var};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), out)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
///
/// Two gradients that are both below `1e-10` in norm compare as equal
/// (error 0); relative error is meaningless there.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

/// Loss terms audited by [`check_loss_terms`], in evaluation order.
pub const TERMS: [&str; 5] = ["l_image", "l_rep", "l_var", "l_orth", "l_cov"];

/// Result of one gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub term: &'static str,
    /// `"proj"` for the projection weights, `"backbone"` for a directional
    /// check over all denoiser parameters.
    pub wrt: &'static str,
    pub rel_err: f64,
}

/// Small configuration used by the gradient audit: `D = 16`, `L = 4`,
/// `B = 2`, `d = 4` in latent mode and `d = 16`, `lambda_z = 0.1` in pixel
/// mode.
pub fn audit_config(mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig::for_mode(mode);
    cfg.grid_side = 2;
    cfg.feat_dim = 16;
    cfg.proj_dim = if mode == Mode::Pixel { 16 } else { 4 };
    cfg.hidden = 8;
    cfg.blocks = 1;
    cfg.dec_hidden = 8;
    cfg.dec_blocks = 1;
    cfg.batch_size = 2;
    cfg
}

/// Fixed inputs of one audit.
struct Probe {
    x0: Tensor,
    z0: Tensor,
    labels: Vec<usize>,
    t: Tensor,
    eps_x: Tensor,
    eps_z: Tensor,
}

fn terms<'t>(
    cfg: &TrainConfig,
    net: &Backbone,
    proj: &ProjectionState,
    params: &Bound<'t>,
    w_in: Var<'t>,
    w_target: Var<'t>,
    probe: &Probe,
) -> Result<[Var<'t>; 5]> {
    let tape = w_in.tape();
    let (z_in, _) = proj.forward(tape, w_in, &probe.z0, BnMode::Train)?;
    let z_target = if w_in.id() == w_target.id() {
        z_in
    } else {
        proj.forward(tape, w_target, &probe.z0, BnMode::Train)?.0
    };
    let pair = flow::interpolate_with(&probe.x0, z_in, &probe.t, probe.eps_x.clone(), probe.eps_z.clone())?;
    let (v_x, v_z) = net.forward(params, &pair.x_t, pair.z_t, &probe.t, &probe.labels)?;
    let joint = flow::joint_loss(v_x, v_z, &pair, &probe.x0, z_target, true)?;
    Ok([
        joint.l_image,
        joint.l_rep,
        l_var(z_in, cfg.gamma, cfg.reg_eps)?,
        l_orth(w_in)?,
        l_cov(z_in, CovNorm::Correlation, cfg.reg_eps)?,
    ])
}

fn values(
    cfg: &TrainConfig,
    net: &Backbone,
    proj: &ProjectionState,
    w_in: &Tensor,
    probe: &Probe,
) -> Result<[f64; 5]> {
    let tape = Tape::new();
    let params = net.params.bind(&tape, false);
    let w = tape.constant(w_in.clone());
    let w_target = tape.constant(proj.w.clone());
    let t = terms(cfg, net, proj, &params, w, w_target, probe)?;
    Ok(t.map(|v| v.item()))
}

fn scalar_rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares tape gradients of every loss term with central differences.
///
/// Returns one entry per term for the projection weights plus directional
/// checks of the two velocity losses over the denoiser parameters.
pub fn check_loss_terms(cfg: &TrainConfig, seed: u64, directions: usize) -> Result<Vec<TermCheck>> {
    let mut rng = rng::stream(seed, purpose::EVAL, 0x6c);
    let net = Backbone::init(Dims::from_config(cfg), seed)?;
    let mut proj = ProjectionState::init(cfg.feat_dim, cfg.proj_dim, seed)?.with_bn(
        cfg.bn_momentum,
        cfg.bn_eps,
        cfg.bn_pool_tokens,
        cfg.tokens(),
    );
    // move away from orthonormal so the orthogonality penalty is active
    let scale = rng.random_range(0.5..2.0);
    let jitter = Tensor::randn(proj.w.shape(), &mut rng).scale(0.1);
    proj.w = proj.w.scale(scale).zip_map(&jitter, |a, b| a + b)?;

    let b = cfg.batch_size;
    let probe = Probe {
        x0: Tensor::randn(&[b, cfg.image_tokens(), cfg.c_img], &mut rng),
        z0: Tensor::randn(&[b, cfg.tokens(), cfg.feat_dim], &mut rng),
        labels: (0..b).map(|_| rng.random_range(0..cfg.classes)).collect(),
        t: Tensor::from_vec((0..b).map(|_| rng.random_range(0.05..0.95)).collect()),
        eps_x: Tensor::randn(&[b, cfg.image_tokens(), cfg.c_img], &mut rng),
        eps_z: Tensor::randn(&[b, cfg.tokens(), cfg.proj_dim], &mut rng),
    };

    // tape gradients
    let tape = Tape::new();
    let params = net.params.bind(&tape, true);
    let w = tape.leaf(proj.w.clone());
    let vars = terms(cfg, &net, &proj, &params, w, w, &probe)?;
    let mut analytic_w = Vec::with_capacity(5);
    let mut analytic_theta = Vec::with_capacity(2);
    for (i, v) in vars.iter().enumerate() {
        let g = v.backward()?;
        analytic_w.push(g.wrt(&w));
        if i < 2 {
            analytic_theta.push(params.grads(&g));
        }
    }

    // projection: entry-wise central differences, all terms per evaluation
    let mut fd_w: Vec<Vec<f64>> = vec![vec![0.0; proj.w.len()]; 5];
    let mut probe_w = proj.w.clone();
    for i in 0..probe_w.len() {
        let orig = probe_w.data()[i];
        probe_w.data_mut()[i] = orig + FD_STEP;
        let up = values(cfg, &net, &proj, &probe_w, &probe)?;
        probe_w.data_mut()[i] = orig - FD_STEP;
        let down = values(cfg, &net, &proj, &probe_w, &probe)?;
        probe_w.data_mut()[i] = orig;
        for k in 0..5 {
            fd_w[k][i] = (up[k] - down[k]) / (2.0 * FD_STEP);
        }
    }
    let mut out = Vec::new();
    for (k, term) in TERMS.iter().enumerate() {
        let fd = Tensor::new(proj.w.shape(), fd_w[k].clone())?;
        out.push(TermCheck {
            term,
            wrt: "proj",
            rel_err: relative_error(&analytic_w[k], &fd),
        });
    }

    // denoiser: directional derivatives along random unit directions
    for _ in 0..directions {
        let mut dir = ParamStore::new();
        let mut norm2 = 0.0;
        for (name, p) in net.params.iter() {
            let u = Tensor::randn(p.shape(), &mut rng);
            norm2 += u.data().iter().map(|v| v * v).sum::<f64>();
            dir.insert(name.clone(), u);
        }
        let inv = 1.0 / norm2.sqrt();
        let shifted = |s: f64| -> Result<[f64; 5]> {
            let mut moved = net.clone();
            for (name, p) in moved.params.iter_mut() {
                *p = p.zip_map(dir.get(name)?, |a, u| a + s * inv * u)?;
            }
            values(cfg, &moved, &proj, &proj.w, &probe)
        };
        let up = shifted(FD_STEP)?;
        let down = shifted(-FD_STEP)?;
        for k in 0..2 {
            let fd = (up[k] - down[k]) / (2.0 * FD_STEP);
            let an: f64 = analytic_theta[k]
                .iter()
                .map(|(name, g)| {
                    let u = dir.get(name).expect("same names");
                    g.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum::<f64>()
                * inv;
            out.push(TermCheck {
                term: TERMS[k],
                wrt: "backbone",
                rel_err: scalar_rel(an, fd),
            });
        }
    }
    Ok(out)
}
