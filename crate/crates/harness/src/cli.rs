use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sesa_core::backbone::training_loss;
use sesa_core::control::{ConditionImage, ConditionKind};
use sesa_core::image::{read_pnm, to_latent, write_pnm};
use sesa_core::{Seed, Tensor};
use sesa_semantics::{
    build_dataset, caption, compose, extract_with, Client, ExtractOptions, FewShot, FixtureTable, ModelEndpoint, Role,
};

use crate::attn::dump_attention;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::eval::{evaluate, read_crops, read_image_dir};
use crate::sample::{sample_image, Sidecar};
use crate::synth::gen_synthetic;
use crate::train::{load_dataset, probe_loss, train_epochs, TrainState};

#[derive(Debug, Parser)]
#[command(name = "sesa", version, about = "Hand-aware controllable generation at desk scale")]
pub struct Cli {
    /// Run configuration (key = value lines); defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `data.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the control branch and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint, using its configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample one image.
    Sample(SampleArgs),
    /// Compare two image directories.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value = "")]
        generated_prefix: String,
        #[arg(long, default_value = "")]
        reference_prefix: String,
        /// JSON object mapping image file names to hand boxes.
        #[arg(long)]
        crops: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption, extract and compose prompts for a directory of images.
    ExtractSemantics {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the attention maps of one control-branch pass.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        condition: PathBuf,
        /// Target image noised to step `t`; zeros when absent.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 500)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time forward, training and sampling steps.
    Bench {
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub condition: Option<PathBuf>,
    #[arg(long, required_unless_present = "extract_semantics", conflicts_with = "extract_semantics")]
    pub prompt: Option<String>,
    /// Build the prompt from this image with the configured endpoints.
    #[arg(long)]
    pub extract_semantics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub fusion: Option<Switch>,
    #[arg(long)]
    pub hand_bias_alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(io_err(path))
}

fn condition_image(path: &Path) -> Result<ConditionImage> {
    Ok(ConditionImage::new(read_pnm(path)?, ConditionKind::SyntheticSilhouette)?)
}

fn fixtures(cfg: &RunConfig) -> Result<Option<Arc<FixtureTable>>> {
    if cfg.semantics.fixtures.is_empty() {
        return Ok(None);
    }
    Ok(Some(Arc::new(FixtureTable::load(Path::new(&cfg.semantics.fixtures))?)))
}

fn clients(cfg: &RunConfig) -> Result<(Client, Client)> {
    let s = &cfg.semantics;
    let table = fixtures(cfg)?;
    let timeout = Duration::from_millis(s.timeout_ms);
    let ep = |url: &str, role| ModelEndpoint::new(url, &s.model, timeout, s.retries, role);
    let cap = Client::for_endpoint(ep(&s.captioner_url, Role::Captioner)?, table.clone())?;
    let ext = Client::for_endpoint(ep(&s.extractor_url, Role::Extractor)?, table)?;
    Ok((cap, ext))
}

#[derive(Debug, Serialize)]
struct TrainLog {
    epochs: usize,
    losses: Vec<f64>,
    probe_before: f64,
    probe_after: f64,
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::GenData { out, count } => {
            let n = count.unwrap_or(cfg.data.count);
            let records = gen_synthetic(n, Seed(cfg.train.seed), cfg.image_extent, &out)?;
            let crops: std::collections::BTreeMap<String, Vec<_>> = records.iter().map(|r| (r.target.clone(), vec![r.hand_box])).collect();
            write_json(&out.join("crops.json"), &crops)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { data, out, epochs, resume } => {
            let (cfg, mut state) = match &resume {
                Some(p) => {
                    let (mut c, s) = checkpoint::load(p)?;
                    if let Some(seed) = cli.seed {
                        c.train.seed = seed;
                    }
                    (c, s)
                }
                None => (cfg.clone(), TrainState::fresh(&cfg)?),
            };
            let items = load_dataset(&data, &cfg)?;
            let epochs = epochs.unwrap_or(cfg.train.epochs);
            let probe_before = probe_loss(&cfg, &state.model, &items)?;
            let losses = train_epochs(&cfg, &mut state, &items, epochs)?;
            let probe_after = probe_loss(&cfg, &state.model, &items)?;
            checkpoint::save(&out, &cfg, &state)?;
            let log = TrainLog { epochs: state.epoch, losses, probe_before, probe_after };
            write_json(&out.with_extension("json"), &log)?;
            println!("epoch {}: probe loss {probe_before:.6} -> {probe_after:.6}", state.epoch);
        }
        Command::Sample(args) => {
            let (cfg, state) = match &cli.config {
                Some(_) => {
                    let s = checkpoint::load_as(&args.checkpoint, &cfg)?;
                    (cfg, s)
                }
                None => {
                    let (mut c, s) = checkpoint::load(&args.checkpoint)?;
                    if let Some(seed) = cli.seed {
                        c.train.seed = seed;
                    }
                    (c, s)
                }
            };
            let mut cfg = cfg;
            if let Some(n) = args.steps {
                cfg.schedule.sample_steps = n;
                cfg.validate()?;
            }
            let mut model = state.model;
            match args.fusion {
                Some(Switch::On) => model.fusion.enabled = true,
                Some(Switch::Off) => model.fusion.enabled = false,
                None => {}
            }
            if let Some(a) = args.hand_bias_alpha {
                if !(a.is_finite() && a >= 0.0) {
                    return Err(HarnessError::Usage(format!("--hand-bias-alpha {a} must be finite and >= 0")));
                }
                model.enhance.alpha = a;
            }
            let prompt = match (&args.prompt, &args.extract_semantics) {
                (Some(p), _) => p.clone(),
                (None, Some(img)) => {
                    let (cap, ext) = clients(&cfg)?;
                    let text = caption(img, &cap)?;
                    let opts = ExtractOptions { max_field_len: cfg.semantics.max_field_len };
                    compose(&extract_with(&text, &FewShot::default(), &ext, &opts)?.record).final_text
                }
                (None, None) => return Err(HarnessError::Usage("need --prompt or --extract-semantics".into())),
            };
            let cond = args.condition.as_deref().map(condition_image).transpose()?;
            let seed = cfg.train.seed;
            let img = sample_image(&cfg, &model, &prompt, cond.as_ref(), seed)?;
            write_pnm(&args.out, &img)?;
            let cond_name = args.condition.as_ref().map(|p| p.display().to_string());
            write_json(&args.out.with_extension("json"), &Sidecar::new(&cfg, &model, seed, &prompt, cond_name, state.epoch))?;
        }
        Command::Eval { generated, reference, generated_prefix, reference_prefix, crops, out } => {
            let gen = read_image_dir(&generated, &generated_prefix)?;
            let refs = read_image_dir(&reference, &reference_prefix)?;
            let table = crops.as_deref().map(read_crops).transpose()?;
            let report = evaluate(&cfg, &gen, &refs, table.as_ref())?;
            write_json(&out, &report)?;
        }
        Command::ExtractSemantics { images, out } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&images)
                .map_err(io_err(&images))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| ["ppm", "pgm", "png", "jpg", "jpeg"].contains(&x.to_string_lossy().as_ref())))
                .collect();
            paths.sort();
            let (cap, ext) = clients(&cfg)?;
            let opts = ExtractOptions { max_field_len: cfg.semantics.max_field_len };
            let lines = build_dataset(&paths, &cap, &ext, &FewShot::default(), &opts, cfg.semantics.parallelism, &out)?;
            let failed: Vec<_> = lines.iter().filter(|l| l.status != "ok").collect();
            println!("{} of {} images ok", lines.len() - failed.len(), lines.len());
            if !failed.is_empty() {
                let network = failed.iter().any(|l| l.status == "network_error");
                let msg = format!("{} image(s) failed; see {}", failed.len(), out.display());
                return Err(if network {
                    HarnessError::Semantics(sesa_semantics::SemanticsError::Network { endpoint: "semantics".into(), attempts: 0, status: None, detail: msg })
                } else {
                    HarnessError::Data(msg)
                });
            }
        }
        Command::DumpAttn { checkpoint: ckpt, condition, target, prompt, t, out } => {
            let (cfg, state) = checkpoint::load(&ckpt)?;
            let cond = condition_image(&condition)?;
            let latent = match &target {
                Some(p) => to_latent(&read_pnm(p)?, cfg.latent_factor())?,
                None => Tensor::zeros(&cfg.model.latent_shape()),
            };
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let index = dump_attention(&cfg, &state.model, &latent, &prompt, &cond, t, seed, &out)?;
            println!("wrote {} maps to {}", index.len(), out.display());
        }
        Command::Bench { iters } => {
            let report = bench(&cfg, iters.max(1))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub iters: usize,
    pub predict_ms: f64,
    pub train_step_ms: f64,
    pub sample_ms: f64,
}

pub fn bench(cfg: &RunConfig, iters: usize) -> Result<BenchReport> {
    let state = TrainState::fresh(cfg)?;
    let m = &state.model;
    let mut rng = Seed(cfg.train.seed).rng();
    let e = cfg.image_extent;
    let cond = ConditionImage::new(Tensor::uniform(&[cfg.condition_channels, e, e], 0.0, 1.0, &mut rng), ConditionKind::SyntheticSilhouette)?;
    let z0 = to_latent(&Tensor::uniform(&[3, e, e], 0.0, 1.0, &mut rng), cfg.latent_factor())?;
    let text = m.encode_text("a hand holding a cup")?;
    let sched = cfg.noise_schedule()?;
    let per = |start: Instant| start.elapsed().as_secs_f64() * 1e3 / iters as f64;

    let start = Instant::now();
    for i in 0..iters {
        m.predict_eps(&z0, 1 + i % sched.steps(), &text, &cond)?;
    }
    let predict_ms = per(start);

    let start = Instant::now();
    for _ in 0..iters {
        let batch = vec![z0.clone(); cfg.train.batch];
        let loss = training_loss(&batch, &sched, &mut rng, |_, n| m.predict_eps(&n.z_t, n.t, &text, &cond))?;
        loss.backward()?;
    }
    let train_step_ms = per(start);

    let start = Instant::now();
    sample_image(cfg, m, "a hand holding a cup", Some(&cond), cfg.train.seed)?;
    let sample_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(BenchReport { iters, predict_ms, train_step_ms, sample_ms })
}
