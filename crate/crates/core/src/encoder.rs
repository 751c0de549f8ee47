//! Frozen synthetic encoder, the joint dataset, and the fixed PCA baseline.
//!
//! Images are token grids drawn from a `K`-class model: every class owns a
//! smooth mean field over the grid, each sample adds a smooth per-sample
//! field and independent per-token noise. The frozen encoder maps each
//! token (after 2x2 pooling in pixel mode) through a fixed random affine map
//! followed by `tanh`.
//!
//! # Binary dataset layout
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//!
//! ```text
//! magic "CRDS" | version | L | C_img | D | K | N | L_img
//! then N records of: label (f64) | x0 (L_img * C_img) | z0 (L * D)
//! ```
//!
//! `L_img` equals `L` in latent mode and `4 L` in pixel mode. Generated
//! samples use the same layout with `D` set to the projected width.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CRDS";
const VERSION: u32 = 1;

/// One training example: image tokens, their frozen features, a class.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    /// `[L_img, C_img]`
    pub x0: Tensor,
    /// `[L, D]`
    pub z0: Tensor,
    pub label: usize,
}

/// Shape parameters of the synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    /// Representation token count; must be a perfect square.
    pub tokens: usize,
    /// Image tokens per representation token along one side (1 or 2).
    pub upscale: usize,
    pub c_img: usize,
    pub feat_dim: usize,
    pub classes: usize,
    pub noise: f64,
    pub feature_scale: f64,
    pub gain: f64,
    /// Seed of the class fields and the encoder, shared by train and eval.
    pub world_seed: u64,
}

impl DataSpec {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        DataSpec {
            tokens: cfg.tokens(),
            upscale: match cfg.mode {
                Mode::Latent => 1,
                Mode::Pixel => 2,
            },
            c_img: cfg.c_img,
            feat_dim: cfg.feat_dim,
            classes: cfg.classes,
            noise: cfg.data_noise,
            feature_scale: cfg.feature_scale,
            gain: cfg.encoder_gain,
            world_seed: cfg.seed,
        }
    }

    pub fn grid_side(&self) -> Result<usize> {
        let side = (self.tokens as f64).sqrt().round() as usize;
        if side == 0 || side * side != self.tokens {
            return Err(Error::config(
                "grid_side",
                format!("token count {} is not a positive perfect square", self.tokens),
            ));
        }
        Ok(side)
    }

    pub fn image_side(&self) -> Result<usize> {
        Ok(self.grid_side()? * self.upscale)
    }

    pub fn image_tokens(&self) -> Result<usize> {
        let s = self.image_side()?;
        Ok(s * s)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 1 {
            return Err(Error::config("classes", "need at least one class"));
        }
        if self.upscale != 1 && self.upscale != 2 {
            return Err(Error::config("mode", "image grid must be 1x or 2x the token grid"));
        }
        if self.c_img == 0 || self.feat_dim == 0 {
            return Err(Error::config("c_img", "dimensions must be positive"));
        }
        self.grid_side().map(|_| ())
    }
}

/// Fixed random affine map `C_img -> D` followed by `tanh`, scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    weight: Tensor,
    bias: Tensor,
    scale: f64,
    tokens: usize,
    seed: u64,
}

impl FrozenEncoder {
    pub fn new(spec: &DataSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(spec.world_seed, purpose::INIT, 0xE4C0);
        let weight = Tensor::randn(&[spec.c_img, spec.feat_dim], &mut rng)
            .scale(spec.gain / (spec.c_img as f64).sqrt());
        let bias = Tensor::randn(&[1, spec.feat_dim], &mut rng).scale(0.5 * spec.gain);
        Ok(FrozenEncoder {
            weight,
            bias,
            scale: spec.feature_scale,
            tokens: spec.tokens,
            seed: spec.world_seed,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Lipschitz bound of [`FrozenEncoder::encode`] in the latent layout.
    pub fn lipschitz_bound(&self) -> Result<f64> {
        Ok(self.scale * linalg::operator_norm(&self.weight, 500)?)
    }

    fn pooled(&self, x0: &Tensor) -> Result<Tensor> {
        let (l_img, c) = x0.dims2()?;
        if c != self.weight.shape()[0] {
            return Err(Error::dim(format!(
                "encoder expects {} channels, got {c}",
                self.weight.shape()[0]
            )));
        }
        if l_img == self.tokens {
            Ok(x0.clone())
        } else if l_img == 4 * self.tokens {
            avg_pool2(x0)
        } else {
            Err(Error::dim(format!(
                "encoder expects {} or {} tokens, got {l_img}",
                self.tokens,
                4 * self.tokens
            )))
        }
    }

    /// `z0 = VE(x0)`, shape `[L, D]`.
    pub fn encode(&self, x0: &Tensor) -> Result<Tensor> {
        let h = self.pooled(x0)?.matmul(&self.weight)?;
        let d = self.bias.len();
        let mut out = h.into_data();
        for row in out.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v = self.scale * (*v + b).tanh();
            }
        }
        Tensor::new(&[self.tokens, d], out)
    }

    /// The same map recorded on a tape. Encoder weights enter as constants,
    /// so no gradient can ever reach them.
    pub fn encode_on_tape<'t>(&self, tape: &'t Tape, x0: Var<'t>) -> Result<Var<'t>> {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let h = x0.matmul(&w)?.add(&b)?.tanh();
        Ok(h.scale(self.scale))
    }
}

/// 2x2 average pooling over a square token grid, `[S*S, C] -> [(S/2)^2, C]`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (l, c) = x.dims2()?;
    let side = (l as f64).sqrt().round() as usize;
    if side * side != l || side % 2 != 0 {
        return Err(Error::dim(format!("cannot 2x2-pool a grid of {l} tokens")));
    }
    let half = side / 2;
    let mut out = vec![0.0; half * half * c];
    for r in 0..side {
        for col in 0..side {
            let dst = ((r / 2) * half + col / 2) * c;
            for ch in 0..c {
                out[dst + ch] += 0.25 * x.data()[(r * side + col) * c + ch];
            }
        }
    }
    Tensor::new(&[half * half, c], out)
}

/// Batched 2x2 pooling, `[B, S*S, C] -> [B, (S/2)^2, C]`.
pub fn avg_pool2_batch(x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    let parts = (0..b)
        .map(|i| x.index0(i).and_then(|s| avg_pool2(&s)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// Class mean fields and per-sample structure.
struct World {
    /// `[K][L_img * C]`
    class_means: Vec<Vec<f64>>,
    side: usize,
    c: usize,
}

impl World {
    fn new(spec: &DataSpec) -> Result<Self> {
        let side = spec.image_side()?;
        let mut rng = rng::stream(spec.world_seed, purpose::DATA, 0xC1A55);
        let class_means = (0..spec.classes)
            .map(|_| smooth_field(side, spec.c_img, 3, 1.0, &mut rng))
            .collect();
        Ok(World {
            class_means,
            side,
            c: spec.c_img,
        })
    }
}

/// Sum of low-frequency planar waves over a `side x side` grid, per channel.
fn smooth_field<R: Rng + ?Sized>(side: usize, c: usize, waves: usize, amp: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; side * side * c];
    for ch in 0..c {
        for _ in 0..waves {
            let fu: f64 = rng.random_range(-1.0..1.0);
            let fv: f64 = rng.random_range(-1.0..1.0);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let a: f64 = amp * rng.sample::<f64, _>(StandardNormal) / (waves as f64).sqrt();
            for r in 0..side {
                for col in 0..side {
                    let (u, v) = (r as f64 / side as f64, col as f64 / side as f64);
                    out[(r * side + col) * c + ch] += a * (PI * (fu * u + fv * v) + phase).cos();
                }
            }
        }
    }
    out
}

/// Draws `n` joint samples. Deterministic in `(spec, seed)`.
pub fn make_dataset(spec: &DataSpec, n: usize, seed: u64) -> Result<Vec<JointSample>> {
    spec.validate()?;
    let world = World::new(spec)?;
    let encoder = FrozenEncoder::new(spec)?;
    let l_img = world.side * world.side;
    (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, purpose::DATA, i as u64);
            let label = rng.random_range(0..spec.classes);
            let local = smooth_field(world.side, world.c, 2, 0.5, &mut rng);
            let data: Vec<f64> = world.class_means[label]
                .iter()
                .zip(&local)
                .map(|(m, s)| m + s + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let x0 = Tensor::new(&[l_img, world.c], data)?;
            let z0 = encoder.encode(&x0)?;
            Ok(JointSample { x0, z0, label })
        })
        .collect()
}

/// Training and held-out evaluation sets for a config.
pub fn datasets_for(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let spec = DataSpec::from_config(cfg);
    let train = Dataset::from_samples(&spec, make_dataset(&spec, cfg.n_train, cfg.seed)?)?;
    let eval_seed = cfg.seed ^ 0x5eed_e7a1_0000_0000;
    let eval = Dataset::from_samples(&spec, make_dataset(&spec, cfg.n_eval, eval_seed)?)?;
    Ok((train, eval))
}

/// A set of joint samples with their shared shape metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tokens: usize,
    pub image_tokens: usize,
    pub c_img: usize,
    pub feat_dim: usize,
    pub classes: usize,
    pub samples: Vec<JointSample>,
}

impl Dataset {
    pub fn from_samples(spec: &DataSpec, samples: Vec<JointSample>) -> Result<Self> {
        Ok(Dataset {
            tokens: spec.tokens,
            image_tokens: spec.image_tokens()?,
            c_img: spec.c_img,
            feat_dim: spec.feat_dim,
            classes: spec.classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the selected samples: `([B, L_img, C], [B, L, D], labels)`.
    pub fn batch(&self, index: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        let xs: Vec<Tensor> = index.iter().map(|&i| self.samples[i].x0.clone()).collect();
        let zs: Vec<Tensor> = index.iter().map(|&i| self.samples[i].z0.clone()).collect();
        let labels = index.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&xs)?, Tensor::stack(&zs)?, labels))
    }

    pub fn features(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.z0.clone()).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.tokens as u32,
            self.c_img as u32,
            self.feat_dim as u32,
            self.classes as u32,
            self.samples.len() as u32,
            self.image_tokens as u32,
        ] {
            w.write_u32::<LittleEndian>(v)?;
        }
        for s in &self.samples {
            w.write_f64::<LittleEndian>(s.label as f64)?;
            for &v in s.x0.data().iter().chain(s.z0.data()) {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let io = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let mut header = [0u32; 7];
        for h in header.iter_mut() {
            *h = r.read_u32::<LittleEndian>().map_err(io)?;
        }
        let [version, l, c, d, k, n, l_img] = header.map(|v| v as usize);
        if version as u32 != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.read_f64::<LittleEndian>().map_err(io)?;
            let mut x = vec![0.0; l_img * c];
            r.read_f64_into::<LittleEndian>(&mut x).map_err(io)?;
            let mut z = vec![0.0; l * d];
            r.read_f64_into::<LittleEndian>(&mut z).map_err(io)?;
            samples.push(JointSample {
                x0: Tensor::new(&[l_img, c], x)?,
                z0: Tensor::new(&[l, d], z)?,
                label: label as usize,
            });
        }
        Ok(Dataset {
            tokens: l,
            image_tokens: l_img,
            c_img: c,
            feat_dim: d,
            classes: k,
            samples,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file), path)
    }
}

/// Fixed centered projection onto the top principal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    /// `[D, d]`, orthonormal columns.
    pub components: Tensor,
    /// `[D]`
    pub mean: Tensor,
    /// Top-`d` eigenvalues of the feature covariance.
    pub explained: Vec<f64>,
}

impl PcaProjection {
    /// `(z - mean) P` for `[.., D]` inputs.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        let d_feat = self.mean.len();
        if z.shape().last() != Some(&d_feat) {
            return Err(Error::dim(format!(
                "PCA expects trailing extent {d_feat}, got {:?}",
                z.shape()
            )));
        }
        let mut centered = z.clone();
        for row in centered.data_mut().chunks_mut(d_feat) {
            for (v, m) in row.iter_mut().zip(self.mean.data()) {
                *v -= m;
            }
        }
        centered.matmul(&self.components)
    }
}

/// Fits a `d`-component PCA on the pooled token features.
pub fn fit_pca(features: &[Tensor], d: usize) -> Result<PcaProjection> {
    let rows = Tensor::stack_rows(features)?;
    let (n, d_feat) = rows.dims2()?;
    if d > d_feat {
        return Err(Error::config("proj_dim", format!("{d} exceeds feature dimension {d_feat}")));
    }
    if n < d {
        return Err(Error::Stats(format!("{n} samples cannot determine {d} components")));
    }
    let (mean, cov) = linalg::mean_covariance(&rows)?;
    let (vals, vecs) = linalg::symmetric_eigen(&cov)?;
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let rank = vals.iter().filter(|&&v| v > 1e-10 * top.max(1e-300)).count();
    if rank < d {
        return Err(Error::Rank { rank, requested: d });
    }
    let mut comps = vec![0.0; d_feat * d];
    for j in 0..d {
        let col: Vec<f64> = (0..d_feat).map(|i| vecs.at2(i, j)).collect();
        let pivot = col
            .iter()
            .cloned()
            .fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d_feat {
            comps[i * d + j] = sign * col[i];
        }
    }
    Ok(PcaProjection {
        components: Tensor::new(&[d_feat, d], comps)?,
        mean: Tensor::from_vec(mean),
        explained: vals[..d].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DataSpec {
        DataSpec::from_config(&TrainConfig::latent())
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = make_dataset(&spec(), 8, 11).unwrap();
        let b = make_dataset(&spec(), 8, 11).unwrap();
        assert_eq!(a, b);
        let c = make_dataset(&spec(), 8, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stored_features_match_encoder() {
        let s = spec();
        let enc = FrozenEncoder::new(&s).unwrap();
        for sample in make_dataset(&s, 4, 1).unwrap() {
            assert_eq!(enc.encode(&sample.x0).unwrap(), sample.z0);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec();
        s.classes = 0;
        assert!(matches!(make_dataset(&s, 1, 0), Err(Error::Config { .. })));
        let mut s = spec();
        s.tokens = 15;
        assert!(matches!(make_dataset(&s, 1, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_input_gives_identical_rows() {
        let s = spec();
        let enc = FrozenEncoder::new(&s).unwrap();
        let z = enc.encode(&Tensor::zeros(&[s.tokens, s.c_img])).unwrap();
        for t in 1..s.tokens {
            assert_eq!(z.row(t), z.row(0));
        }
        let expected: Vec<f64> = enc.bias.data().iter().map(|b| s.feature_scale * b.tanh()).collect();
        assert_eq!(z.row(0), expected.as_slice());
    }

    #[test]
    fn encoder_rejects_wrong_shape() {
        let s = spec();
        let enc = FrozenEncoder::new(&s).unwrap();
        assert!(enc.encode(&Tensor::zeros(&[5, s.c_img])).is_err());
        assert!(enc.encode(&Tensor::zeros(&[s.tokens, s.c_img + 1])).is_err());
    }

    #[test]
    fn pixel_samples_pool_before_encoding() {
        let s = DataSpec::from_config(&TrainConfig::pixel());
        let data = make_dataset(&s, 2, 3).unwrap();
        assert_eq!(data[0].x0.shape(), &[64, 4]);
        assert_eq!(data[0].z0.shape(), &[16, 64]);
    }

    #[test]
    fn pooling_averages_blocks() {
        let x = Tensor::new(&[16, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn binary_roundtrip() {
        let s = spec();
        let ds = Dataset::from_samples(&s, make_dataset(&s, 3, 5).unwrap()).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CRDS");
        let back = Dataset::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        let err = Dataset::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn pca_rank_error() {
        // every row lies on one line
        let rows: Vec<Tensor> = (0..10)
            .map(|i| Tensor::new(&[1, 3], vec![i as f64, 2.0 * i as f64, 0.0]).unwrap())
            .collect();
        let err = fit_pca(&rows, 2).unwrap_err();
        assert!(matches!(err, Error::Rank { rank: 1, requested: 2 }));
    }
}
