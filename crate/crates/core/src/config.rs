//! Training configuration and its flat key/value file format.
//!
//! Files are flat TOML tables. Every key is optional; omitted keys take the
//! defaults of the selected `mode`. Unknown keys, type mismatches and
//! violated invariants are rejected with an error naming the key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Latent,
    Pixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    Var,
    Orth,
    Cov,
    None,
}

impl std::str::FromStr for RegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "var" | "variance" => Ok(RegKind::Var),
            "orth" | "orthogonality" => Ok(RegKind::Orth),
            "cov" | "covariance" => Ok(RegKind::Cov),
            "none" => Ok(RegKind::None),
            other => Err(Error::config("reg", format!("unknown regularizer `{other}`"))),
        }
    }
}

/// How the channel covariance is normalized in the covariance penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovNorm {
    Correlation,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampler {
    Uniform,
    LogitNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    Euler,
    EulerMaruyama,
    Heun,
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SamplerMethod::Euler),
            "euler_maruyama" | "em" | "sde" => Ok(SamplerMethod::EulerMaruyama),
            "heun" => Ok(SamplerMethod::Heun),
            other => Err(Error::config("method", format!("unknown sampler `{other}`"))),
        }
    }
}

/// Ablation switches; each one is independent of the others.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoSg,
    NoBn,
    RegNone,
    FixedPca,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_sg" => Ok(Ablation::NoSg),
            "no_bn" => Ok(Ablation::NoBn),
            "reg_none" => Ok(Ablation::RegNone),
            "fixed_pca" => Ok(Ablation::FixedPca),
            other => Err(Error::config("ablate", format!("unknown ablation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::NoSg => "no_sg",
            Ablation::NoBn => "no_bn",
            Ablation::RegNone => "reg_none",
            Ablation::FixedPca => "fixed_pca",
        })
    }
}

/// All hyperparameters of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,

    // data and encoder
    /// Side of the representation token grid; `L = grid_side^2`.
    pub grid_side: usize,
    pub c_img: usize,
    pub feat_dim: usize,
    pub proj_dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub data_noise: f64,
    /// Output magnitude of the frozen encoder. Pretrained encoders emit
    /// features far from unit scale; batch normalization removes it.
    pub feature_scale: f64,
    /// Pre-activation gain of the frozen encoder.
    pub encoder_gain: f64,

    // backbone
    pub hidden: usize,
    pub blocks: usize,
    pub dec_hidden: usize,
    pub dec_blocks: usize,
    pub label_dropout: f64,

    // objective
    pub lambda_z: f64,
    pub lambda_reg: f64,
    pub reg: RegKind,
    pub gamma: f64,
    pub reg_eps: f64,
    pub cov_norm: CovNorm,

    // projection
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub bn_pool_tokens: bool,

    // optimization
    pub lr: f64,
    pub lr_proj: f64,
    pub proj_schedule: ProjSchedule,
    /// Cosine horizon; 0 means "total steps".
    pub proj_decay_steps: u64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub time_sampler: TimeSampler,
    pub milestones: usize,

    // ablations
    pub no_sg: bool,
    pub no_bn: bool,
    pub reg_none: bool,
    pub fixed_pca: bool,

    // sampling and evaluation
    pub sample_method: SamplerMethod,
    pub sample_steps: usize,
    pub sde_sigma: f64,
    pub cfg_scale: f64,
    pub n_gen: usize,
    pub r_near: usize,
    pub r_far: usize,
}

impl TrainConfig {
    pub fn latent() -> Self {
        TrainConfig {
            mode: Mode::Latent,
            seed: 0,
            grid_side: 4,
            c_img: 4,
            feat_dim: 64,
            proj_dim: 8,
            classes: 4,
            n_train: 1024,
            n_eval: 128,
            data_noise: 0.25,
            feature_scale: 25.0,
            encoder_gain: 1.0,
            hidden: 64,
            blocks: 2,
            dec_hidden: 32,
            dec_blocks: 3,
            label_dropout: 0.1,
            lambda_z: 1.0,
            lambda_reg: 1.0,
            reg: RegKind::Var,
            gamma: 1.0,
            reg_eps: 1e-5,
            cov_norm: CovNorm::Correlation,
            bn_momentum: 0.9,
            bn_eps: 1e-10,
            bn_pool_tokens: true,
            lr: 1e-3,
            lr_proj: 2e-4,
            proj_schedule: ProjSchedule::Constant,
            proj_decay_steps: 0,
            ema_decay: 0.9999,
            batch_size: 32,
            steps: 2000,
            time_sampler: TimeSampler::Uniform,
            milestones: 5,
            no_sg: false,
            no_bn: false,
            reg_none: false,
            fixed_pca: false,
            sample_method: SamplerMethod::EulerMaruyama,
            sample_steps: 50,
            sde_sigma: 1.0,
            cfg_scale: 1.8,
            n_gen: 512,
            r_near: 2,
            r_far: 4,
        }
    }

    pub fn pixel() -> Self {
        TrainConfig {
            mode: Mode::Pixel,
            proj_dim: 16,
            lambda_z: 0.1,
            time_sampler: TimeSampler::LogitNormal,
            sample_method: SamplerMethod::Heun,
            cfg_scale: 1.0,
            ..Self::latent()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Latent => Self::latent(),
            Mode::Pixel => Self::pixel(),
        }
    }

    /// Representation token count.
    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Side of the image token grid: doubled in pixel mode.
    pub fn image_side(&self) -> usize {
        match self.mode {
            Mode::Latent => self.grid_side,
            Mode::Pixel => 2 * self.grid_side,
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.image_side() * self.image_side()
    }

    /// Effective regularizer after the `reg_none` ablation.
    pub fn effective_reg(&self) -> RegKind {
        if self.reg_none {
            RegKind::None
        } else {
            self.reg
        }
    }

    pub fn proj_horizon(&self) -> u64 {
        if self.proj_decay_steps == 0 {
            self.steps
        } else {
            self.proj_decay_steps
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::NoSg => self.no_sg = true,
            Ablation::NoBn => self.no_bn = true,
            Ablation::RegNone => self.reg_none = true,
            Ablation::FixedPca => self.fixed_pca = true,
        }
        self
    }

    /// Checks every invariant, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        let positive_usize = [
            ("grid_side", self.grid_side),
            ("c_img", self.c_img),
            ("feat_dim", self.feat_dim),
            ("proj_dim", self.proj_dim),
            ("classes", self.classes),
            ("n_train", self.n_train),
            ("n_eval", self.n_eval),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("dec_hidden", self.dec_hidden),
            ("dec_blocks", self.dec_blocks),
            ("batch_size", self.batch_size),
            ("milestones", self.milestones),
            ("sample_steps", self.sample_steps),
            ("n_gen", self.n_gen),
        ];
        for (key, v) in positive_usize {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let positive = [
            ("lr", self.lr),
            ("lr_proj", self.lr_proj),
            ("gamma", self.gamma),
            ("feature_scale", self.feature_scale),
            ("encoder_gain", self.encoder_gain),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lambda_z", self.lambda_z),
            ("lambda_reg", self.lambda_reg),
            ("reg_eps", self.reg_eps),
            ("bn_eps", self.bn_eps),
            ("data_noise", self.data_noise),
            ("sde_sigma", self.sde_sigma),
        ];
        for (key, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be non-negative, got {v}")));
            }
        }
        let unit_open = [
            ("bn_momentum", self.bn_momentum),
            ("ema_decay", self.ema_decay),
        ];
        for (key, v) in unit_open {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(key, format!("must lie in (0, 1), got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return Err(Error::config("label_dropout", "must lie in [0, 1)"));
        }
        if self.proj_dim > self.feat_dim {
            return Err(Error::config(
                "proj_dim",
                format!("{} exceeds feat_dim {}", self.proj_dim, self.feat_dim),
            ));
        }
        if self.proj_dim < 2 {
            return Err(Error::config("proj_dim", "need at least 2 channels"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 1.0) {
            return Err(Error::config("cfg_scale", "must be >= 1"));
        }
        if self.r_near > self.r_far {
            return Err(Error::config("r_near", "must not exceed r_far"));
        }
        if self.batch_size * self.tokens() < 2 {
            return Err(Error::config("batch_size", "batch statistics need >= 2 tokens"));
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = unknown_key(&msg).unwrap_or_else(|| "<file>".into());
            Error::config(key, msg)
        })?;
        let cfg = raw.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Full serialization with every key present.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable digest of the serialized config.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::latent()
    }
}

/// Pull the key name out of toml's messages, e.g. "unknown field `foo`"
/// or "invalid type ... for key `bar`".
fn unknown_key(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}

macro_rules! raw_config {
    ($($field:ident : $ty:ty),* $(,)?) => {
        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawConfig {
            mode: Option<Mode>,
            $($field: Option<$ty>,)*
        }

        impl RawConfig {
            fn resolve(self) -> TrainConfig {
                let mut cfg = TrainConfig::for_mode(self.mode.unwrap_or(Mode::Latent));
                $(if let Some(v) = self.$field { cfg.$field = v; })*
                cfg
            }
        }
    };
}

raw_config! {
    seed: u64,
    grid_side: usize,
    c_img: usize,
    feat_dim: usize,
    proj_dim: usize,
    classes: usize,
    n_train: usize,
    n_eval: usize,
    data_noise: f64,
    feature_scale: f64,
    encoder_gain: f64,
    hidden: usize,
    blocks: usize,
    dec_hidden: usize,
    dec_blocks: usize,
    label_dropout: f64,
    lambda_z: f64,
    lambda_reg: f64,
    reg: RegKind,
    gamma: f64,
    reg_eps: f64,
    cov_norm: CovNorm,
    bn_momentum: f64,
    bn_eps: f64,
    bn_pool_tokens: bool,
    lr: f64,
    lr_proj: f64,
    proj_schedule: ProjSchedule,
    proj_decay_steps: u64,
    ema_decay: f64,
    batch_size: usize,
    steps: u64,
    time_sampler: TimeSampler,
    milestones: usize,
    no_sg: bool,
    no_bn: bool,
    reg_none: bool,
    fixed_pca: bool,
    sample_method: SamplerMethod,
    sample_steps: usize,
    sde_sigma: f64,
    cfg_scale: f64,
    n_gen: usize,
    r_near: usize,
    r_far: usize,
}
