//! `coredi` command line.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use coredi_core::config::{Ablation, SamplerMethod};
use coredi_core::encoder::{datasets_for, Dataset, JointSample};
use coredi_core::gradcheck::{audit_config, check_loss_terms, TERMS};
use coredi_core::metrics::MetricReport;
use coredi_core::report::{emit_curves, write_json};
use coredi_core::samplers::{sample, SampleConfig};
use coredi_core::trainer::{ablate, run, Checkpoint};
use coredi_core::{Error, Mode, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "coredi", version, about = "Joint image/representation flow matching at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Latent,
    Pixel,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Latent => Mode::Latent,
            ModeArg::Pixel => Mode::Pixel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, or a baseline/ablation pair with --ablate.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults used when no config file is given.
        #[arg(long, value_enum, default_value = "latent")]
        mode: ModeArg,
        #[arg(long)]
        ablate: Option<Ablation>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        method: Option<SamplerMethod>,
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance weight for the image branch.
        #[arg(long = "cfg")]
        cfg_scale: Option<f64>,
        /// Class id; omitted means unconditional.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spatial metrics and collapse diagnostics of a feature file.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
        /// Project the features with this checkpoint first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 2)]
        r_near: usize,
        #[arg(long, default_value_t = 4)]
        r_far: usize,
    },
    /// Finite-difference audit of the loss gradients.
    Gradcheck {
        /// `all` or one of l_image, l_rep, l_var, l_orth, l_cov.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, value_enum, default_value = "latent")]
        mode: ModeArg,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write the synthetic dataset of a config.
    Dataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "latent")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect milestone reports of a run directory into curves.json.
    Curves {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: Option<&Path>, mode: ModeArg) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_path(p),
        None => Ok(TrainConfig::for_mode(mode.into())),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, mode, ablate: ablation, seed, steps, out } => {
            let mut cfg = load_config(config.as_deref(), mode)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            match ablation {
                Some(a) => print_json(&ablate(&cfg, a, &out)?),
                None => print_json(&run(&cfg, &out)?),
            }
        }
        Command::Sample { checkpoint, method, steps, cfg_scale, label, seed, n, out } => {
            let state = Checkpoint::load(&checkpoint)?.state;
            let mut sc = SampleConfig::from_config(&state.config);
            sc.method = method.unwrap_or(sc.method);
            sc.steps = steps.unwrap_or(sc.steps);
            sc.cfg_scale = cfg_scale.unwrap_or(sc.cfg_scale);
            sc.label = label;
            sc.seed = seed;
            sc.n = n;
            if let Some(l) = label {
                if l >= state.config.classes {
                    return Err(Error::Config {
                        key: "label".into(),
                        msg: format!("class {l} out of range for {} classes", state.config.classes),
                    });
                }
            }
            let (x, z) = sample(&state.model, &sc)?;
            let null = state.model.null_label();
            let samples = (0..n)
                .map(|i| {
                    Ok(JointSample {
                        x0: x.index0(i)?,
                        z0: z.index0(i)?,
                        label: label.unwrap_or(null),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let cfg = &state.config;
            let generated = Dataset {
                tokens: cfg.tokens(),
                image_tokens: cfg.image_tokens(),
                c_img: cfg.c_img,
                feat_dim: cfg.proj_dim,
                classes: cfg.classes,
                samples,
            };
            generated.save(&out)?;
        }
        Command::Metrics { input, checkpoint, report, r_near, r_far } => {
            let data = Dataset::load(&input)?;
            let index: Vec<usize> = (0..data.len()).collect();
            let (_, z0, _) = data.batch(&index)?;
            let z = match checkpoint {
                Some(ck) => Checkpoint::load(&ck)?.state.project_eval(&z0)?,
                None => z0,
            };
            let side = (data.tokens as f64).sqrt().round() as usize;
            let r = MetricReport::from_batch(&z, side, r_near, r_far)?;
            write_json(&report, &r)?;
            print_json(&r);
        }
        Command::Gradcheck { module, mode, seeds, tol } => {
            if module != "all" && !TERMS.contains(&module.as_str()) {
                return Err(Error::Config {
                    key: "module".into(),
                    msg: format!("expected `all` or one of {}", TERMS.join(", ")),
                });
            }
            let cfg = audit_config(mode.into());
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                for c in check_loss_terms(&cfg, seed, 2)? {
                    if module == "all" || module == c.term {
                        println!("seed {seed} {:<8} wrt {:<8} rel_err {:.3e}", c.term, c.wrt, c.rel_err);
                        worst = worst.max(c.rel_err);
                    }
                }
            }
            println!("worst relative error {worst:.3e} (tolerance {tol:.0e})");
            if !(worst <= tol) {
                return Err(Error::Stats(format!("gradient check failed: {worst:.3e} > {tol:.0e}")));
            }
        }
        Command::Dataset { config, mode, split, out } => {
            let cfg = load_config(config.as_deref(), mode)?;
            let (train, eval) = datasets_for(&cfg)?;
            match split {
                Split::Train => train.save(&out)?,
                Split::Eval => eval.save(&out)?,
            }
        }
        Command::Curves { run } => {
            emit_curves(&run)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
