//! End-to-end optimization of the denoiser and the projection.
//!
//! Each step draws its batch, times, noise and label dropout from
//! generators keyed by `(seed, step)`, so a resumed run replays an unbroken
//! one exactly. The denoiser and the projection are separate parameter
//! groups with their own learning rates; the projection rate may follow a
//! cosine decay.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, Dims};
use crate::config::{Ablation, ProjSchedule, TrainConfig};
use crate::encoder::{datasets_for, fit_pca, Dataset};
use crate::error::{Error, Result};
use crate::flow::{self, LossBreakdown};
use crate::metrics::{self, MetricReport};
use crate::params::{Bound, ParamStore};
use crate::projection::{BatchStats, BnMode, ProjectionState};
use crate::regularizers::{regularize, RegConfig};
use crate::report::{self, MilestoneRecord, RunLock, RunManifest};
use crate::rng::{self, purpose};
use crate::samplers::{sample_with_labels, SampleConfig};
use crate::tensor::Tensor;

/// Name of the projection weight in optimizer state and checkpoints.
pub const PROJ_W: &str = "proj.w";
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Projection learning rate at `step`.
pub fn schedule_lr_proj(step: u64, cfg: &TrainConfig) -> f64 {
    match cfg.proj_schedule {
        ProjSchedule::Constant => cfg.lr_proj,
        ProjSchedule::Cosine => {
            let horizon = cfg.proj_horizon().max(1);
            if step >= horizon {
                return 0.0;
            }
            let frac = step as f64 / horizon as f64;
            cfg.lr_proj * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// AdamW moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advances the shared bias-correction counter; call once per step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::dim(format!("gradient shape mismatch for `{name}`")));
        }
        let t = self.step.max(1) as i32;
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let wd = self.weight_decay;
        for (((p, g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = BETA1 * *mi + (1.0 - BETA1) * g;
            *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
            let step = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            *p -= lr * (step + wd * *p);
        }
        Ok(())
    }
}

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, L_img, C]`
    pub x0: Tensor,
    /// `[B, L, D]`
    pub z0: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(data: &Dataset, index: &[usize]) -> Result<Self> {
        let (x0, z0, labels) = data.batch(index)?;
        Ok(Batch { x0, z0, labels })
    }
}

/// Recorded loss graph of one step.
pub struct StepGraph<'t> {
    pub total: Var<'t>,
    pub l_image: Var<'t>,
    pub l_rep: Var<'t>,
    pub l_reg: Var<'t>,
    /// Projected clean representation `[B, L, d]`.
    pub z0_tilde: Var<'t>,
    pub stats: Option<BatchStats>,
}

impl StepGraph<'_> {
    pub fn breakdown(&self, cfg: &TrainConfig) -> LossBreakdown {
        LossBreakdown::new(
            self.l_image.item(),
            self.l_rep.item(),
            self.l_reg.item(),
            cfg.lambda_z,
            cfg.lambda_reg,
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Backbone,
    pub proj: ProjectionState,
    pub opt: Adam,
    /// Exponential moving average of the denoiser and projection weights.
    pub ema: ParamStore,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    /// Fresh state. The fixed-PCA ablation fits its projection on `train`.
    pub fn new(config: TrainConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        let model = Backbone::init(Dims::from_config(&config), config.seed)?;
        let mut proj = ProjectionState::init(config.feat_dim, config.proj_dim, config.seed)?.with_bn(
            config.bn_momentum,
            config.bn_eps,
            config.bn_pool_tokens,
            config.tokens(),
        );
        if config.fixed_pca {
            proj.w = fit_pca(&train.features(), config.proj_dim)?.components;
        }
        let mut ema = model.params.clone();
        ema.insert(PROJ_W, proj.w.clone());
        Ok(TrainState {
            config,
            model,
            proj,
            opt: Adam::new(0.0),
            ema,
            step: 0,
        })
    }

    fn bn_mode(&self, training: bool) -> BnMode {
        match (self.config.no_bn, training) {
            (true, _) => BnMode::Off,
            (false, true) => BnMode::Train,
            (false, false) => BnMode::Eval,
        }
    }

    /// Batch indices of `step`, drawn with replacement.
    pub fn batch_index(&self, n: usize, step: u64) -> Vec<usize> {
        let mut rng = rng::stream(self.config.seed, purpose::STEP, 2 * step);
        (0..self.config.batch_size).map(|_| rng.random_range(0..n)).collect()
    }

    pub fn batch_for_step(&self, data: &Dataset, step: u64) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        Batch::from_dataset(data, &self.batch_index(data.len(), step))
    }

    /// Records the full objective of `step` on `tape`.
    ///
    /// `w` is the handle for the projection weights; pass a leaf to
    /// differentiate through it.
    pub fn graph<'t>(
        &self,
        tape: &'t Tape,
        params: &Bound<'t>,
        w: Var<'t>,
        batch: &Batch,
        step: u64,
    ) -> Result<StepGraph<'t>> {
        let cfg = &self.config;
        let mut rng = rng::stream(cfg.seed, purpose::STEP, 2 * step + 1);
        let (z0_tilde, stats) = self.proj.forward(tape, w, &batch.z0, self.bn_mode(true))?;
        let b = batch.labels.len();
        let t = flow::sample_t(b, cfg.time_sampler, &mut rng);
        let labels: Vec<usize> = batch
            .labels
            .iter()
            .map(|&y| {
                if rng.random::<f64>() < cfg.label_dropout {
                    self.model.null_label()
                } else {
                    y
                }
            })
            .collect();
        let pair = flow::interpolate(&batch.x0, z0_tilde, &t, &mut rng)?;
        let (v_x, v_z) = self.model.forward(params, &pair.x_t, pair.z_t, &t, &labels)?;
        let terms = flow::joint_loss(v_x, v_z, &pair, &batch.x0, z0_tilde, !cfg.no_sg)?;
        let l_reg = regularize(&RegConfig::from_config(cfg), tape, z0_tilde, w)?;
        let total = flow::total_loss(&terms, l_reg, cfg.lambda_z, cfg.lambda_reg)?;
        Ok(StepGraph {
            total,
            l_image: terms.l_image,
            l_rep: terms.l_rep,
            l_reg,
            z0_tilde,
            stats,
        })
    }

    /// Loss of `step` on `batch` without updating anything.
    pub fn evaluate_loss(&self, batch: &Batch, step: u64) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let params = self.model.params.bind(&tape, false);
        let w = tape.constant(self.proj.w.clone());
        Ok(self.graph(&tape, &params, w, batch, step)?.breakdown(&self.config))
    }

    /// One optimizer update; advances `self.step`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let step = self.step;
        let tape = Tape::new();
        let params = self.model.params.bind(&tape, true);
        let frozen = self.config.fixed_pca;
        let w = if frozen {
            tape.constant(self.proj.w.clone())
        } else {
            tape.leaf(self.proj.w.clone())
        };
        let graph = self.graph(&tape, &params, w, batch, step)?;
        let losses = graph.breakdown(&self.config);
        if !losses.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "l_image={} l_rep={} l_reg={} total={}",
                    losses.l_image, losses.l_rep, losses.l_reg, losses.total
                ),
            });
        }
        let grads = graph.total.backward()?;
        let model_grads = params.grads(&grads);
        let w_grad = grads.wrt(&w);
        let stats = graph.stats;
        drop(params);

        self.opt.tick();
        let lr = self.config.lr;
        for (name, p) in self.model.params.iter_mut() {
            self.opt.update(name, p, &model_grads[name], lr)?;
        }
        if !frozen {
            let lr_proj = schedule_lr_proj(step, &self.config);
            self.opt.update(PROJ_W, &mut self.proj.w, &w_grad, lr_proj)?;
        }
        if let Some(stats) = stats {
            self.proj.update_running(&stats)?;
        }
        self.update_ema()?;
        self.step += 1;
        Ok(losses)
    }

    fn update_ema(&mut self) -> Result<()> {
        let decay = self.config.ema_decay;
        let live = self
            .model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(std::iter::once((PROJ_W.to_string(), &self.proj.w)));
        for (name, value) in live {
            let e = self.ema.get_mut(&name)?;
            *e = e.zip_map(value, |a, b| decay * a + (1.0 - decay) * b)?;
        }
        Ok(())
    }

    /// Projected representations of `z0 [N, L, D]` with running statistics.
    pub fn project_eval(&self, z0: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let w = tape.constant(self.proj.w.clone());
        let (out, _) = self.proj.forward(&tape, w, z0, self.bn_mode(false))?;
        let value = (*out.value()).clone();
        Ok(value)
    }

    /// Metric report on the projected evaluation set.
    ///
    /// Channels are standardized with the statistics of the whole evaluation
    /// set rather than the running estimates, which trail the batch noise of
    /// the last few steps.
    pub fn metric_report(&self, eval: &Dataset) -> Result<MetricReport> {
        let index: Vec<usize> = (0..eval.len()).collect();
        let (_, z0, _) = eval.batch(&index)?;
        let tape = Tape::new();
        let w = tape.constant(self.proj.w.clone());
        let mode = if self.config.no_bn { BnMode::Off } else { BnMode::Train };
        let (out, _) = self.proj.forward(&tape, w, &z0, mode)?;
        let z = (*out.value()).clone();
        MetricReport::from_batch(&z, self.config.grid_side, self.config.r_near, self.config.r_far)
    }

    /// Fréchet distance between generated and reference images, flattened
    /// per sample. Labels cycle through the classes.
    pub fn frechet(&self, reference: &Dataset) -> Result<f64> {
        let cfg = &self.config;
        let labels: Vec<usize> = (0..cfg.n_gen).map(|i| i % cfg.classes).collect();
        let mut sc = SampleConfig::from_config(cfg);
        sc.seed = cfg.seed;
        let (x, _) = sample_with_labels(&self.model, &sc, &labels)?;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: "generated samples are not finite".into(),
            });
        }
        let index: Vec<usize> = (0..reference.len()).collect();
        let (x_ref, _, _) = reference.batch(&index)?;
        let flat = |t: &Tensor| {
            let n = t.shape()[0];
            t.reshape(&[n, t.len() / n])
        };
        metrics::frechet_gaussian(&flat(&x)?, &flat(&x_ref)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { state: self.clone() }
    }
}

/// Serialized [`TrainState`].
///
/// Layout: magic `CRCK`, `u32` version, `u64` header length, a JSON header
/// (config as TOML text, its digest, step, optimizer step, batch-norm
/// settings and the ordered tensor table), then every tensor as
/// little-endian `f64` in table order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
}

const CKPT_MAGIC: &[u8; 4] = b"CRCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config_toml: String,
    config_digest: String,
    step: u64,
    adam_step: u64,
    adam_weight_decay: f64,
    bn_momentum: f64,
    bn_eps: f64,
    bn_pool_tokens: bool,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let s = &self.state;
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (k, v) in s.model.params.iter() {
            out.push((format!("model/{k}"), v));
        }
        out.push(("proj/w".into(), &s.proj.w));
        out.push(("proj/running_mean".into(), &s.proj.running_mean));
        out.push(("proj/running_var".into(), &s.proj.running_var));
        for (k, v) in &s.opt.m {
            out.push((format!("adam.m/{k}"), v));
        }
        for (k, v) in &s.opt.v {
            out.push((format!("adam.v/{k}"), v));
        }
        for (k, v) in s.ema.iter() {
            out.push((format!("ema/{k}"), v));
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let s = &self.state;
        let tensors = self.tensors();
        let header = CkptHeader {
            config_toml: s.config.to_toml(),
            config_digest: s.config.digest(),
            step: s.step,
            adam_step: s.opt.step,
            adam_weight_decay: s.opt.weight_decay,
            bn_momentum: s.proj.momentum,
            bn_eps: s.proj.eps,
            bn_pool_tokens: s.proj.pool_tokens,
            tensors: tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(CKPT_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for (_, t) in tensors {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        let io = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CKPT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)?;
        if len > 1 << 30 {
            return Err(fmt(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: CkptHeader = serde_json::from_slice(&json).map_err(|e| fmt(e.to_string()))?;
        let config: TrainConfig = toml::from_str(&header.config_toml).map_err(|e| fmt(e.to_string()))?;
        if config.digest() != header.config_digest {
            return Err(fmt("config digest mismatch".into()));
        }

        let mut model = ParamStore::new();
        let mut ema = ParamStore::new();
        let mut opt = Adam::new(header.adam_weight_decay);
        opt.step = header.adam_step;
        let mut proj_parts: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, shape) in &header.tensors {
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            let t = Tensor::new(shape, data)?;
            let (group, key) = name
                .split_once('/')
                .ok_or_else(|| fmt(format!("bad tensor name `{name}`")))?;
            match group {
                "model" => model.insert(key, t),
                "ema" => ema.insert(key, t),
                "adam.m" => {
                    opt.m.insert(key.to_string(), t);
                }
                "adam.v" => {
                    opt.v.insert(key.to_string(), t);
                }
                "proj" => {
                    proj_parts.insert(key.to_string(), t);
                }
                _ => return Err(fmt(format!("unknown tensor group `{group}`"))),
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(fmt("trailing bytes after payload".into()));
        }
        let mut take = |k: &str| {
            proj_parts
                .remove(k)
                .ok_or_else(|| fmt(format!("missing projection tensor `{k}`")))
        };
        let proj = ProjectionState {
            w: take("w")?,
            running_mean: take("running_mean")?,
            running_var: take("running_var")?,
            momentum: header.bn_momentum,
            eps: header.bn_eps,
            pool_tokens: header.bn_pool_tokens,
        };
        let dims = Dims::from_config(&config);
        let reference = Backbone::init(dims, config.seed)?;
        for (k, v) in reference.params.iter() {
            match model.get(k) {
                Ok(t) if t.shape() == v.shape() => {}
                _ => return Err(fmt(format!("parameter `{k}` missing or misshapen"))),
            }
        }
        Ok(Checkpoint {
            state: TrainState {
                config,
                model: Backbone { dims, params: model },
                proj,
                opt,
                ema,
                step: header.step,
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file), path)
    }
}

/// Outcome of [`run`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    /// Mean total loss over the last tenth of the run.
    pub final_loss: f64,
    pub final_metrics: MetricReport,
    pub frechet_gaussian: f64,
    pub milestones: Vec<MilestoneRecord>,
}

/// Milestone steps: `milestones` evenly spaced points ending at `steps`.
pub fn milestone_steps(cfg: &TrainConfig) -> Vec<u64> {
    let m = cfg.milestones.max(1) as u64;
    (1..=m).map(|k| (k * cfg.steps).div_ceil(m)).collect()
}

fn csv_row(step: u64, l: &LossBreakdown, lr_proj: f64) -> String {
    format!(
        "{step},{},{},{},{},{lr_proj}\n",
        l.l_image, l.l_rep, l.l_reg, l.total
    )
}

/// Trains `state` for `n` steps, appending loss rows to `log` when given.
pub fn run_steps(
    state: &mut TrainState,
    train: &Dataset,
    n: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossBreakdown>> {
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let step = state.step;
        let batch = state.batch_for_step(train, step)?;
        let l = state.train_step(&batch)?;
        if let Some(w) = log.as_deref_mut() {
            w.write_all(csv_row(step, &l, schedule_lr_proj(step, &state.config)).as_bytes())
                .map_err(|e| Error::io("loss.csv", e))?;
        }
        out.push(l);
    }
    Ok(out)
}

fn write_diagnostic(dir: &Path, state: &TrainState, err: &Error) -> Result<()> {
    let norms: BTreeMap<String, f64> = state
        .model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.frobenius_norm()))
        .chain(std::iter::once((PROJ_W.to_string(), state.proj.w.frobenius_norm())))
        .collect();
    let doc = serde_json::json!({
        "error": err.to_string(),
        "step": state.step,
        "param_norms": norms,
        "running_mean": state.proj.running_mean.data(),
        "running_var": state.proj.running_var.data(),
    });
    report::write_json(&dir.join("diagnostic.json"), &doc)
}

/// Trains a fresh model under `cfg`, writing the run directory `dir`.
pub fn run(cfg: &TrainConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _lock = RunLock::acquire(dir)?;
    let started = report::unix_now();
    let (train, eval) = datasets_for(cfg)?;
    let mut state = TrainState::new(cfg.clone(), &train)?;
    fs::write(dir.join(report::CONFIG), cfg.to_toml()).map_err(|e| Error::io(dir.join(report::CONFIG), e))?;

    let csv_path = dir.join(report::LOSS_CSV);
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", report::CSV_HEADER).map_err(|e| Error::io(&csv_path, e))?;

    let mut records = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for (k, &target) in milestone_steps(cfg).iter().enumerate() {
        let n = target - state.step;
        match run_steps(&mut state, &train, n, Some(&mut csv)) {
            Ok(l) => history.extend(l),
            Err(err) => {
                let _ = csv.flush();
                if matches!(err, Error::NonFinite { .. }) {
                    write_diagnostic(dir, &state, &err)?;
                }
                return Err(err);
            }
        }
        let metrics = state.metric_report(&eval)?;
        let record = MilestoneRecord {
            milestone: k + 1,
            step: state.step,
            metrics,
            loss: *history.last().ok_or_else(|| Error::config("steps", "must be positive"))?,
        };
        state.checkpoint().save(&dir.join(report::checkpoint_file(k + 1)))?;
        report::write_json(&dir.join(report::milestone_file(k + 1)), &record)?;
        records.push(record);
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    drop(csv);

    let tail = (history.len() / 10).max(1);
    let final_loss = history[history.len() - tail..].iter().map(|l| l.total).sum::<f64>() / tail as f64;
    let frechet = state.frechet(&train)?;
    let summary = RunSummary {
        steps: state.step,
        final_loss,
        final_metrics: records.last().expect("at least one milestone").metrics,
        frechet_gaussian: frechet,
        milestones: records,
    };
    report::write_json(&dir.join("summary.json"), &summary)?;
    RunManifest::collect(dir, cfg, started)?.save(dir)?;
    Ok(summary)
}

/// Resumes the run stored in `checkpoint` for `extra` steps.
pub fn resume(checkpoint: &Path, extra: u64) -> Result<(TrainState, Vec<LossBreakdown>)> {
    let mut state = Checkpoint::load(checkpoint)?.state;
    let (train, _) = datasets_for(&state.config)?;
    let losses = run_steps(&mut state, &train, extra, None)?;
    Ok((state, losses))
}

/// Diagnostics of one side of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub final_loss: f64,
    pub offdiag_cov_mass: f64,
    pub effective_rank: f64,
    pub frechet_gaussian: f64,
    /// Step at which training stopped on a non-finite value.
    pub halted_at: Option<u64>,
}

impl Diagnostics {
    fn from_summary(s: &RunSummary) -> Self {
        Diagnostics {
            final_loss: s.final_loss,
            offdiag_cov_mass: s.final_metrics.offdiag_cov_mass,
            effective_rank: s.final_metrics.effective_rank,
            frechet_gaussian: s.frechet_gaussian,
            halted_at: None,
        }
    }

    fn halted(step: u64) -> Self {
        Diagnostics {
            final_loss: f64::NAN,
            offdiag_cov_mass: f64::NAN,
            effective_rank: f64::NAN,
            frechet_gaussian: f64::INFINITY,
            halted_at: Some(step),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: String,
    pub seed: u64,
    pub baseline: Diagnostics,
    pub ablated: Diagnostics,
}

fn run_or_halt(cfg: &TrainConfig, dir: &Path) -> Result<Diagnostics> {
    match run(cfg, dir) {
        Ok(s) => Ok(Diagnostics::from_summary(&s)),
        Err(Error::NonFinite { step, .. }) => Ok(Diagnostics::halted(step)),
        Err(e) => Err(e),
    }
}

/// Runs `cfg` and its ablated twin with the same seed under `dir/baseline`
/// and `dir/<ablation>`.
pub fn ablate(cfg: &TrainConfig, ablation: Ablation, dir: &Path) -> Result<AblationReport> {
    let base_dir: PathBuf = dir.join("baseline");
    let abl_dir: PathBuf = dir.join(ablation.to_string());
    let baseline = run_or_halt(cfg, &base_dir)?;
    let ablated = run_or_halt(&cfg.clone().with_ablation(ablation), &abl_dir)?;
    let report = AblationReport {
        ablation: ablation.to_string(),
        seed: cfg.seed,
        baseline,
        ablated,
    };
    report::write_json(&dir.join("ablation.json"), &report)?;
    Ok(report)
}
