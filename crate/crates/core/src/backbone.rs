//! Joint denoisers.
//!
//! Both modes share one transformer trunk: image tokens and representation
//! tokens are embedded separately and summed channel-wise (merged tokens,
//! so the sequence length stays `L`), a learned positional table is added,
//! and `blocks` pre-norm blocks with single-head attention and an MLP are
//! modulated adaLN-style by a time + class embedding.
//!
//! * Latent mode reads two linear heads off the trunk output, one per
//!   modality.
//! * Pixel mode runs the trunk on 2x2-pooled image tokens to produce the
//!   joint condition `c_joint`, predicts the representation velocity with a
//!   bias-free linear head on `c_joint`, and predicts the full-resolution
//!   image velocity with a small per-token decoder conditioned on
//!   `c_joint` broadcast back to the fine grid.
//!
//! Class id `classes` is the null class used for classifier-free guidance.

use rand::Rng;

use crate::autodiff::Var;
use crate::config::{Mode, TrainConfig};
use crate::encoder::avg_pool2_batch;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// Width of the sinusoidal time features.
pub const TIME_FEATURES: usize = 32;
const LN_EPS: f64 = 1e-6;
const MODULATIONS: [&str; 6] = ["shift1", "scale1", "gate1", "shift2", "scale2", "gate2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub mode: Mode,
    /// Representation tokens `L`.
    pub tokens: usize,
    pub grid_side: usize,
    pub c_img: usize,
    pub proj_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub classes: usize,
    pub dec_hidden: usize,
    pub dec_blocks: usize,
}

impl Dims {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Dims {
            mode: cfg.mode,
            tokens: cfg.tokens(),
            grid_side: cfg.grid_side,
            c_img: cfg.c_img,
            proj_dim: cfg.proj_dim,
            hidden: cfg.hidden,
            blocks: cfg.blocks,
            classes: cfg.classes,
            dec_hidden: cfg.dec_hidden,
            dec_blocks: cfg.dec_blocks,
        }
    }

    pub fn image_tokens(&self) -> usize {
        match self.mode {
            Mode::Latent => self.tokens,
            Mode::Pixel => 4 * self.tokens,
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("grid_side", self.grid_side),
            ("c_img", self.c_img),
            ("proj_dim", self.proj_dim),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("classes", self.classes),
        ];
        for (key, v) in fields {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.mode == Mode::Pixel && (self.dec_hidden == 0 || self.dec_blocks == 0) {
            return Err(Error::config("dec_hidden", "pixel decoder dimensions must be positive"));
        }
        if self.grid_side * self.grid_side != self.tokens {
            return Err(Error::config("grid_side", "token count must equal grid_side^2"));
        }
        Ok(())
    }
}

/// Parameter shapes in a deterministic order.
fn layout(d: &Dims) -> Vec<(String, Vec<usize>)> {
    let (h, c, k) = (d.hidden, d.c_img, d.proj_dim);
    let trunk = match d.mode {
        Mode::Latent => "trunk",
        Mode::Pixel => "enc",
    };
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| out.push((name, shape));
    add(format!("{trunk}.emb.x.w"), vec![c, h]);
    add(format!("{trunk}.emb.z.w"), vec![k, h]);
    add(format!("{trunk}.emb.b"), vec![h]);
    add(format!("{trunk}.pos"), vec![d.tokens, h]);
    add(format!("{trunk}.time.w1"), vec![TIME_FEATURES, h]);
    add(format!("{trunk}.time.b1"), vec![h]);
    add(format!("{trunk}.time.w2"), vec![h, h]);
    add(format!("{trunk}.time.b2"), vec![h]);
    add(format!("{trunk}.class"), vec![d.classes + 1, h]);
    for i in 0..d.blocks {
        let p = format!("{trunk}.blk{i}");
        for m in MODULATIONS {
            add(format!("{p}.mod.{m}.w"), vec![h, h]);
            add(format!("{p}.mod.{m}.b"), vec![h]);
        }
        for a in ["q", "k", "v", "o"] {
            add(format!("{p}.attn.{a}"), vec![h, h]);
        }
        add(format!("{p}.mlp.w1"), vec![h, 2 * h]);
        add(format!("{p}.mlp.b1"), vec![2 * h]);
        add(format!("{p}.mlp.w2"), vec![2 * h, h]);
        add(format!("{p}.mlp.b2"), vec![h]);
    }
    for m in ["shift", "scale"] {
        add(format!("{trunk}.final.{m}.w"), vec![h, h]);
        add(format!("{trunk}.final.{m}.b"), vec![h]);
    }
    match d.mode {
        Mode::Latent => {
            add("head.x.w".into(), vec![h, c]);
            add("head.x.b".into(), vec![c]);
            add("head.z.w".into(), vec![h, k]);
            add("head.z.b".into(), vec![k]);
        }
        Mode::Pixel => {
            let hd = d.dec_hidden;
            add("head.z.w".into(), vec![h, k]);
            add("dec.in.w".into(), vec![c, hd]);
            add("dec.in.b".into(), vec![hd]);
            add("dec.cond.w".into(), vec![h, hd]);
            add("dec.pos".into(), vec![4 * d.tokens, hd]);
            for j in 0..d.dec_blocks {
                let p = format!("dec.blk{j}");
                for m in ["shift", "scale"] {
                    add(format!("{p}.mod.{m}.w"), vec![h, hd]);
                    add(format!("{p}.mod.{m}.b"), vec![hd]);
                }
                add(format!("{p}.w1"), vec![hd, 2 * hd]);
                add(format!("{p}.b1"), vec![2 * hd]);
                add(format!("{p}.w2"), vec![2 * hd, hd]);
                add(format!("{p}.b2"), vec![hd]);
            }
            add("dec.out.w".into(), vec![hd, c]);
            add("dec.out.b".into(), vec![c]);
        }
    }
    out
}

/// Parameter count of a backbone with these dimensions.
pub fn count_params(d: &Dims) -> Result<usize> {
    d.validate()?;
    Ok(layout(d).iter().map(|(_, s)| s.iter().product::<usize>()).sum())
}

fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in = shape[0] as f64;
    if shape.len() == 1 {
        // biases start small but non-zero so that every path is live
        return Tensor::randn(shape, rng).scale(0.01);
    }
    let std = if name.contains(".pos") || name.ends_with(".class") {
        0.1
    } else if name.contains(".mod.") || name.contains(".final.") {
        0.5 / fan_in.sqrt()
    } else {
        1.0 / fan_in.sqrt()
    };
    Tensor::randn(shape, rng).scale(std)
}

/// Joint denoiser parameters for either mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub dims: Dims,
    pub params: ParamStore,
}

impl Backbone {
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng::stream(seed, purpose::INIT, 0xBB);
        let mut params = ParamStore::new();
        for (name, shape) in layout(&dims) {
            let t = init_tensor(&name, &shape, &mut rng);
            params.insert(name, t);
        }
        Ok(Backbone { dims, params })
    }

    pub fn null_label(&self) -> usize {
        self.dims.classes
    }

    fn trunk_prefix(&self) -> &'static str {
        match self.dims.mode {
            Mode::Latent => "trunk",
            Mode::Pixel => "enc",
        }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&l| l > self.dims.classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range (classes {}, null {})",
                self.dims.classes, self.dims.classes
            )));
        }
        Ok(())
    }

    /// Velocity prediction for either mode: `(v_x, v_z)`.
    ///
    /// `x_t` is `[B, L_img, C]`, `z_t` is `[B, L, d]`, `t` is `[B]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x_t: &Tensor,
        z_t: Var<'t>,
        t: &Tensor,
        labels: &[usize],
    ) -> Result<(Var<'t>, Var<'t>)> {
        match self.dims.mode {
            Mode::Latent => self.forward_latent(p, x_t, z_t, t, labels),
            Mode::Pixel => self.forward_pixel(p, x_t, z_t, t, labels),
        }
    }

    pub fn forward_latent<'t>(
        &self,
        p: &Bound<'t>,
        x_t: &Tensor,
        z_t: Var<'t>,
        t: &Tensor,
        labels: &[usize],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let o = self.trunk(p, x_t, z_t, t, labels)?;
        let v_x = o.matmul(&p.get("head.x.w")?)?.add(&p.get("head.x.b")?)?;
        let v_z = o.matmul(&p.get("head.z.w")?)?.add(&p.get("head.z.b")?)?;
        Ok((v_x, v_z))
    }

    pub fn forward_pixel<'t>(
        &self,
        p: &Bound<'t>,
        x_t_full: &Tensor,
        z_t: Var<'t>,
        t: &Tensor,
        labels: &[usize],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let expected = self.dims.image_tokens();
        if x_t_full.ndim() != 3 || x_t_full.shape()[1] != expected {
            return Err(Error::dim(format!(
                "pixel mode expects [B, {expected}, C] image tokens, got {:?}",
                x_t_full.shape()
            )));
        }
        let x_down = avg_pool2_batch(x_t_full)?;
        let c_joint = self.trunk(p, &x_down, z_t, t, labels)?;
        let v_z = self.representation_head(p, c_joint)?;
        let v_x = self.decode(p, c_joint, x_t_full)?;
        Ok((v_x, v_z))
    }

    /// Pixel-mode representation velocity `c_joint W_dec`.
    pub fn representation_head<'t>(&self, p: &Bound<'t>, c_joint: Var<'t>) -> Result<Var<'t>> {
        c_joint.matmul(&p.get("head.z.w")?)
    }

    /// Pixel decoder: full-resolution image velocity from `x_t` and
    /// `c_joint`.
    pub fn decode<'t>(&self, p: &Bound<'t>, c_joint: Var<'t>, x_t_full: &Tensor) -> Result<Var<'t>> {
        let tape = c_joint.tape();
        let (b, l, h) = match c_joint.shape()[..] {
            [b, l, h] => (b, l, h),
            ref s => return Err(Error::dim(format!("c_joint must be [B, L, H], got {s:?}"))),
        };
        let side = self.dims.grid_side;
        let fine = 2 * side;
        // parent coarse token of every fine token, flattened over the batch
        let mut index = Vec::with_capacity(b * fine * fine);
        for bi in 0..b {
            for r in 0..fine {
                for c in 0..fine {
                    index.push(bi * l + (r / 2) * side + c / 2);
                }
            }
        }
        let up = c_joint
            .reshape(&[b * l, h])?
            .gather_rows(&index)?
            .reshape(&[b, fine * fine, h])?;
        let x = tape.constant(x_t_full.clone());
        let mut g = x
            .matmul(&p.get("dec.in.w")?)?
            .add(&p.get("dec.in.b")?)?
            .add(&up.matmul(&p.get("dec.cond.w")?)?)?
            .add(&p.get("dec.pos")?)?;
        for j in 0..self.dims.dec_blocks {
            let pre = format!("dec.blk{j}");
            let shift = up
                .matmul(&p.get(&format!("{pre}.mod.shift.w"))?)?
                .add(&p.get(&format!("{pre}.mod.shift.b"))?)?;
            let scale = up
                .matmul(&p.get(&format!("{pre}.mod.scale.w"))?)?
                .add(&p.get(&format!("{pre}.mod.scale.b"))?)?;
            let u = g.layer_norm(LN_EPS)?.mul(&scale.add_scalar(1.0))?.add(&shift)?;
            let m = u
                .matmul(&p.get(&format!("{pre}.w1"))?)?
                .add(&p.get(&format!("{pre}.b1"))?)?
                .silu()
                .matmul(&p.get(&format!("{pre}.w2"))?)?
                .add(&p.get(&format!("{pre}.b2"))?)?;
            g = g.add(&m)?;
        }
        g.layer_norm(LN_EPS)?
            .matmul(&p.get("dec.out.w")?)?
            .add(&p.get("dec.out.b")?)
    }

    /// Shared trunk; returns `[B, L, H]`.
    fn trunk<'t>(
        &self,
        p: &Bound<'t>,
        x_in: &Tensor,
        z_t: Var<'t>,
        t: &Tensor,
        labels: &[usize],
    ) -> Result<Var<'t>> {
        self.check_labels(labels)?;
        let d = &self.dims;
        let b = labels.len();
        if x_in.shape() != [b, d.tokens, d.c_img] {
            return Err(Error::dim(format!(
                "image tokens {:?} do not match [{b}, {}, {}]",
                x_in.shape(),
                d.tokens,
                d.c_img
            )));
        }
        if z_t.shape() != [b, d.tokens, d.proj_dim] {
            return Err(Error::dim(format!(
                "representation tokens {:?} do not match [{b}, {}, {}]",
                z_t.shape(),
                d.tokens,
                d.proj_dim
            )));
        }
        if t.len() != b {
            return Err(Error::dim(format!("{} times for batch of {b}", t.len())));
        }
        let pre = self.trunk_prefix();
        let w = |name: &str| p.get(&format!("{pre}.{name}"));
        let tape = z_t.tape();
        let h_dim = d.hidden;

        let x = tape.constant(x_in.clone());
        let mut h = x
            .matmul(&w("emb.x.w")?)?
            .add(&z_t.matmul(&w("emb.z.w")?)?)?
            .add(&w("emb.b")?)?
            .add(&w("pos")?)?;

        let feats = tape.constant(time_features(t));
        let temb = feats
            .matmul(&w("time.w1")?)?
            .add(&w("time.b1")?)?
            .silu()
            .matmul(&w("time.w2")?)?
            .add(&w("time.b2")?)?;
        let cond = temb.add(&w("class")?.gather_rows(labels)?)?.silu();
        let modulation = |name: String| -> Result<Var<'t>> {
            cond.matmul(&p.get(&format!("{name}.w"))?)?
                .add(&p.get(&format!("{name}.b"))?)?
                .reshape(&[b, 1, h_dim])
        };

        let inv_sqrt_h = 1.0 / (h_dim as f64).sqrt();
        for i in 0..d.blocks {
            let blk = format!("{pre}.blk{i}");
            let m: Vec<Var<'t>> = MODULATIONS
                .iter()
                .map(|n| modulation(format!("{blk}.mod.{n}")))
                .collect::<Result<_>>()?;
            let (shift1, scale1, gate1, shift2, scale2, gate2) = (m[0], m[1], m[2], m[3], m[4], m[5]);

            let u = h.layer_norm(LN_EPS)?.mul(&scale1.add_scalar(1.0))?.add(&shift1)?;
            let q = u.matmul(&p.get(&format!("{blk}.attn.q"))?)?;
            let k = u.matmul(&p.get(&format!("{blk}.attn.k"))?)?;
            let v = u.matmul(&p.get(&format!("{blk}.attn.v"))?)?;
            let att = q.bmm(&k.transpose()?)?.scale(inv_sqrt_h).softmax()?;
            let a = att.bmm(&v)?.matmul(&p.get(&format!("{blk}.attn.o"))?)?;
            h = h.add(&a.mul(&gate1)?)?;

            let u = h.layer_norm(LN_EPS)?.mul(&scale2.add_scalar(1.0))?.add(&shift2)?;
            let mlp = u
                .matmul(&p.get(&format!("{blk}.mlp.w1"))?)?
                .add(&p.get(&format!("{blk}.mlp.b1"))?)?
                .silu()
                .matmul(&p.get(&format!("{blk}.mlp.w2"))?)?
                .add(&p.get(&format!("{blk}.mlp.b2"))?)?;
            h = h.add(&mlp.mul(&gate2)?)?;
        }
        let shift = modulation(format!("{pre}.final.shift"))?;
        let scale = modulation(format!("{pre}.final.scale"))?;
        h.layer_norm(LN_EPS)?.mul(&scale.add_scalar(1.0))?.add(&shift)
    }
}

/// `[cos(1000 t f_i), sin(1000 t f_i)]` with geometric frequencies.
pub fn time_features(t: &Tensor) -> Tensor {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &tv in t.data() {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| 1000.0 * tv * f).collect();
        out.extend(args.iter().map(|a| a.cos()));
        out.extend(args.iter().map(|a| a.sin()));
    }
    Tensor::new(&[t.len(), TIME_FEATURES], out).expect("time feature shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::seeded;

    fn small(mode: Mode) -> Dims {
        let mut cfg = TrainConfig::for_mode(mode);
        cfg.hidden = 8;
        cfg.blocks = 1;
        cfg.grid_side = 2;
        cfg.feat_dim = 16;
        cfg.proj_dim = 4;
        cfg.dec_hidden = 4;
        cfg.dec_blocks = 1;
        Dims::from_config(&cfg)
    }

    #[test]
    fn param_count_by_hand() {
        let d = small(Mode::Latent);
        let (h, c, k, l, f, cls) = (8, 4, 4, 4, TIME_FEATURES, 4);
        let trunk = c * h + k * h + h + l * h + f * h + h + h * h + h + (cls + 1) * h;
        let block = 6 * (h * h + h) + 4 * h * h + h * 2 * h + 2 * h + 2 * h * h + h;
        let fin = 2 * (h * h + h);
        let heads = h * c + c + h * k + k;
        assert_eq!(count_params(&d).unwrap(), trunk + block + fin + heads);
        let net = Backbone::init(d, 0).unwrap();
        assert_eq!(net.params.count(), count_params(&d).unwrap());
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut d = small(Mode::Latent);
        d.hidden = 0;
        assert!(matches!(count_params(&d), Err(Error::Config { .. })));
    }

    #[test]
    fn init_is_deterministic() {
        let d = small(Mode::Pixel);
        assert_eq!(Backbone::init(d, 4).unwrap(), Backbone::init(d, 4).unwrap());
    }

    #[test]
    fn latent_shapes_and_label_check() {
        let d = small(Mode::Latent);
        let net = Backbone::init(d, 1).unwrap();
        let mut rng = seeded(2);
        let tape = Tape::new();
        let p = net.params.bind(&tape, false);
        let x = Tensor::randn(&[3, 4, 4], &mut rng);
        let z = tape.constant(Tensor::randn(&[3, 4, 4], &mut rng));
        let t = Tensor::from_vec(vec![0.1, 0.5, 0.9]);
        let (vx, vz) = net.forward(&p, &x, z, &t, &[0, 3, 4]).unwrap();
        assert_eq!(vx.shape(), vec![3, 4, 4]);
        assert_eq!(vz.shape(), vec![3, 4, 4]);
        let err = net.forward(&p, &x, z, &t, &[0, 1, 5]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn pixel_shapes() {
        let d = small(Mode::Pixel);
        let net = Backbone::init(d, 1).unwrap();
        let mut rng = seeded(3);
        let tape = Tape::new();
        let p = net.params.bind(&tape, false);
        let x = Tensor::randn(&[2, 16, 4], &mut rng);
        let z = tape.constant(Tensor::randn(&[2, 4, 4], &mut rng));
        let t = Tensor::from_vec(vec![0.2, 0.7]);
        let (vx, vz) = net.forward(&p, &x, z, &t, &[0, 1]).unwrap();
        assert_eq!(vx.shape(), vec![2, 16, 4]);
        assert_eq!(vz.shape(), vec![2, 4, 4]);
        let bad = Tensor::randn(&[2, 12, 4], &mut rng);
        assert!(matches!(net.forward(&p, &bad, z, &t, &[0, 1]), Err(Error::Dim(_))));
    }

    #[test]
    fn zero_condition_gives_zero_representation_velocity() {
        let d = small(Mode::Pixel);
        let net = Backbone::init(d, 1).unwrap();
        let tape = Tape::new();
        let p = net.params.bind(&tape, false);
        let c = tape.constant(Tensor::zeros(&[2, 4, 8]));
        let vz = net.representation_head(&p, c).unwrap();
        assert!(vz.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_features_shape() {
        let f = time_features(&Tensor::from_vec(vec![0.0, 1.0]));
        assert_eq!(f.shape(), &[2, TIME_FEATURES]);
        assert_eq!(f.row(0)[0], 1.0);
    }
}
