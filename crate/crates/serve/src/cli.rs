//! The `iwnet` command line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use iwnet_core::experiment::{evaluate, prepare_all, split_cases, write_evaluation, ExperimentConfig, PreparedCase, Split};
use iwnet_core::loss::LossConfig;
use iwnet_core::net::{grad_check, load_checkpoint, save_checkpoint, Precision, WNetConfig, WNetParams};
use iwnet_core::synth::{generate_dataset, read_dataset, write_dataset, DatasetConfig};
use iwnet_core::train::{hyperparam_search, train_stage1, train_stage2, write_jsonl};
use iwnet_core::volgrid::{load_volume, save_volume, Volume};
use iwnet_core::Error;

use crate::points::{parse_points, parse_ps};
use crate::service::{decode_mask, decode_soft, encode_volume, ApiError, CorrectRequest, SegmentRequest, ServiceState};
use crate::sweep::{fieldsweep, strictly_decaying};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;

/// Relative-error gates of the gradient check.
pub const GRADCHECK_TOL_F32: f64 = 1e-3;
pub const GRADCHECK_TOL_F64: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "iwnet", version, about = "Interactive two-block 3-D nodule segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic nodule dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_cases: Option<usize>,
        /// Dataset configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train block 1, then block 2 with block 1 frozen.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stage1_only: bool,
    },
    /// Automatic and point-corrected evaluation on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `split.json` written by `train`; all cases are evaluated without it.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Loss configuration JSON (only `decay_p` is used).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Random search over the loss hyperparameters from a stage-1 model.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        epochs_per_step: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Segment an IWV1 scalar volume with block 1.
    Segment {
        volume: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output stem; `<stem>_soft` and `<stem>_mask` are written.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Correct a prior segmentation from two boundary points.
    Correct {
        volume: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// IWV1 soft mask on the volume grid.
        #[arg(long)]
        prior: PathBuf,
        /// `z0,y0,x0,z1,y1,x1` in voxel units of the volume.
        #[arg(long, allow_hyphen_values = true)]
        points: String,
        /// IWV1 mask; IoU and ASD are printed when given.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on a tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Attraction maps for several decay exponents.
    Fieldsweep {
        #[arg(long, default_value = "0,0.5,1,2")]
        p: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// HTTP correction service.
    Serve {
        /// Checkpoint; a freshly initialized network is served without it.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::NonFiniteGradient(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        if e.status >= 500 {
            CliError::Runtime(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn load_prepared(data: &Path, side: usize) -> CliResult<Vec<PreparedCase>> {
    let cases = read_dataset(data)?;
    if cases.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    Ok(prepare_all(&cases, side)?)
}

fn pick(cases: &[PreparedCase], idx: &[usize]) -> CliResult<Vec<PreparedCase>> {
    idx.iter()
        .map(|&i| {
            cases
                .get(i)
                .cloned()
                .ok_or_else(|| CliError::Validation(format!("split index {i} outside {} cases", cases.len())))
        })
        .collect()
}

fn service(model: &Path, config: Option<&Path>) -> CliResult<ServiceState> {
    let loss: LossConfig = read_config(config)?;
    loss.validate()?;
    Ok(ServiceState::new(load_checkpoint(model)?, loss.decay_p)?)
}

fn out_stem(volume: &Path, out: Option<&Path>, suffix: &str) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| {
        let stem = volume.with_extension("");
        let mut s = stem.into_os_string();
        s.push(suffix);
        s.into()
    })
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn run_command(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData {
            out,
            seed,
            n_cases,
            config,
        } => {
            let mut cfg: DatasetConfig = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_cases {
                cfg.n_cases = n;
            }
            cfg.validate()?;
            let cases = generate_dataset(&cfg)?;
            fs::create_dir_all(&out)?;
            write_dataset(&out, &cases)?;
            write_json(&out.join("dataset.json"), &cfg)?;
            println!("wrote {} cases to {}", cases.len(), out.display());
        }
        Command::Train {
            data,
            out,
            config,
            seed,
            stage1_only,
        } => {
            let mut cfg: ExperimentConfig = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.init_seed = s;
            }
            cfg.stage1_only |= stage1_only;
            cfg.validate()?;
            let prepared = load_prepared(&data, cfg.net.input_side)?;
            let ids: Vec<String> = prepared.iter().map(|c| c.id.clone()).collect();
            let split = split_cases(&ids, cfg.test_frac, cfg.val_frac, cfg.dataset.seed)?;
            let train = pick(&prepared, &split.train)?.iter().map(PreparedCase::train_item).collect::<Vec<_>>();
            let val = pick(&prepared, &split.val)?.iter().map(PreparedCase::train_item).collect::<Vec<_>>();
            fs::create_dir_all(&out)?;
            write_json(&out.join("split.json"), &split)?;
            write_json(&out.join("config.json"), &cfg)?;

            let params = WNetParams::init(cfg.net, cfg.init_seed)?;
            let s1 = train_stage1(params, &train, &val, &cfg.train)?;
            for r in &s1.history {
                eprintln!("stage 1 epoch {} train {:.4} val {:.4} iou {:.3}", r.epoch, r.train_loss, r.val_loss, r.val_iou);
            }
            save_checkpoint(&out.join("stage1"), &s1.params)?;
            let mut history = s1.history;
            let params = if cfg.stage1_only {
                s1.params
            } else {
                let s2 = train_stage2(s1.params, &train, &val, &cfg.train)?;
                for r in &s2.history {
                    eprintln!("stage 2 epoch {} train {:.4} val {:.4} iou {:.3}", r.epoch, r.train_loss, r.val_loss, r.val_iou);
                }
                history.extend(s2.history);
                s2.params
            };
            write_jsonl(&history, BufWriter::new(File::create(out.join("history.jsonl"))?))?;
            save_checkpoint(&out.join("model"), &params)?;
            println!("model written to {}", out.join("model").display());
        }
        Command::Eval {
            model,
            data,
            out,
            split,
            config,
        } => {
            let loss: LossConfig = read_config(config.as_deref())?;
            loss.validate()?;
            let params = load_checkpoint(&model)?;
            let prepared = load_prepared(&data, params.config.input_side)?;
            let test = match split {
                Some(p) => pick(&prepared, &read_json::<Split>(&p)?.test)?,
                None => prepared,
            };
            let ev = evaluate(&params, &test, loss.decay_p)?;
            write_evaluation(&out, &ev)?;
            println!("{}", serde_json::to_string_pretty(&ev.summary)?);
        }
        Command::Search {
            model,
            data,
            out,
            steps,
            epochs_per_step,
            seed,
            config,
        } => {
            let cfg: ExperimentConfig = read_config(config.as_deref())?;
            cfg.validate()?;
            let params = load_checkpoint(&model)?;
            let prepared = load_prepared(&data, params.config.input_side)?;
            let ids: Vec<String> = prepared.iter().map(|c| c.id.clone()).collect();
            let split = split_cases(&ids, cfg.test_frac, cfg.val_frac, cfg.dataset.seed)?;
            let train = pick(&prepared, &split.train)?.iter().map(PreparedCase::train_item).collect::<Vec<_>>();
            let val = pick(&prepared, &split.val)?.iter().map(PreparedCase::train_item).collect::<Vec<_>>();
            let outcome = hyperparam_search(&params, &train, &val, &cfg.train, steps, epochs_per_step, seed)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("search.json"), &outcome)?;
            println!("{}", serde_json::to_string_pretty(&outcome.best)?);
        }
        Command::Segment {
            volume,
            model,
            out,
            config,
        } => {
            let state = service(&model, config.as_deref())?;
            let (header, data_b64) = encode_volume(&load_volume(&volume)?);
            let resp = state.segment(&SegmentRequest { header, data_b64 })?;
            let stem = out_stem(&volume, out.as_deref(), "_seg");
            save_volume(&with_suffix(&stem, "_soft"), &Volume::Soft(decode_soft(&resp.soft_header, &resp.soft_b64)?))?;
            save_volume(&with_suffix(&stem, "_mask"), &Volume::Mask(decode_mask(&resp.mask_header, &resp.mask_b64)?))?;
            println!("{}", stem.display());
        }
        Command::Correct {
            volume,
            model,
            prior,
            points,
            ground_truth,
            out,
            config,
        } => {
            let state = service(&model, config.as_deref())?;
            let points = parse_points(&points)?;
            let (header, data_b64) = encode_volume(&load_volume(&volume)?);
            let (_, prior_b64) = encode_volume(&Volume::Soft(load_volume(&prior)?.into_soft()?));
            let ground_truth_b64 = match ground_truth {
                Some(p) => Some(encode_volume(&Volume::Mask(load_volume(&p)?.into_mask()?)).1),
                None => None,
            };
            let resp = state.correct(&CorrectRequest {
                header,
                data_b64,
                prior_b64,
                points,
                ground_truth_b64,
            })?;
            let stem = out_stem(&volume, out.as_deref(), "_corr");
            let m = &resp.masks;
            save_volume(&with_suffix(&stem, "_soft"), &Volume::Soft(decode_soft(&m.soft_header, &m.soft_b64)?))?;
            save_volume(&with_suffix(&stem, "_mask"), &Volume::Mask(decode_mask(&m.mask_header, &m.mask_b64)?))?;
            if let Some(metrics) = &resp.metrics {
                println!("{}", serde_json::to_string_pretty(metrics)?);
            }
            println!("{}", stem.display());
        }
        Command::Gradcheck { seed } => {
            let config = WNetConfig::tiny();
            let mut ok = true;
            for (precision, tol) in [(Precision::F64, GRADCHECK_TOL_F64), (Precision::F32, GRADCHECK_TOL_F32)] {
                let r = grad_check(&config, seed, precision)?;
                let pass = r.max_rel_err < tol && r.frozen_block1_zero;
                ok &= pass;
                println!(
                    "{:?}: max rel err {:.3e} (< {:.0e}) frozen block 1 {} {}",
                    precision,
                    r.max_rel_err,
                    tol,
                    r.frozen_block1_zero,
                    if pass { "ok" } else { "FAILED" }
                );
            }
            if !ok {
                return Err(CliError::Runtime("gradient check failed".into()));
            }
        }
        Command::Fieldsweep { p, out } => {
            let ps = parse_ps(&p)?;
            let entries = fieldsweep(&ps)?;
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
                for e in &entries {
                    save_volume(&dir.join(format!("field_p{}", e.p)), &Volume::Soft(e.slice.clone()))?;
                }
                write_json(&dir.join("fieldsweep.json"), &entries)?;
            }
            for e in &entries {
                println!("p={} off-segment mean {:.6} max {} swap-symmetric {}", e.p, e.off_segment_mean, e.max, e.swap_symmetric);
            }
            println!("strictly decaying: {}", strictly_decaying(&entries));
        }
        Command::Serve {
            model,
            port,
            seed,
            config,
        } => {
            let state = match &model {
                Some(m) => service(m, config.as_deref())?,
                None => {
                    eprintln!("no --model given; serving an untrained network");
                    let loss: LossConfig = read_config(config.as_deref())?;
                    loss.validate()?;
                    ServiceState::new(WNetParams::init(WNetConfig::default(), seed)?, loss.decay_p)?
                }
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::http::serve(state, SocketAddr::from(([0, 0, 0, 0], port))))?;
        }
    }
    Ok(())
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run_command(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
