//! The `pgan` command line.
//!
//! Settings resolve as built-in defaults, then `PGAN_OUT_DIR` for the output
//! directory, then the `--config` file, then flags. Progress lines on stdout
//! are machine-readable; diagnostics go to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{load_manifest, DataError, ImageRecord};
use crate::eval::{evaluate_checkpoints, sample_images, CentroidModel};
use crate::nets::GleasonLabel;
use crate::phantom::{generate_dataset, phantom_records};
use crate::rng;
use crate::train::{self, compose, real_reference, LossRow, TrainConfig, TrainState};

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "PGAN_OUT_DIR";

const GRADCHECK_TOL: f64 = 1e-2;

/// Phantoms per class used to fit the centroid classifier when no dataset is
/// given to `eval`.
const CENTROID_PER_CLASS: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "pgan", version, about = "Conditional DCGAN training and synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest
    Phantom {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images per class
        #[arg(long, default_value_t = 128)]
        n: usize,
    },
    /// Train, or resume from a checkpoint with --ckpt
    Train(TrainArgs),
    /// Sample images of one score from a checkpoint
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        score: i64,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Defaults to the run's seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the evaluation grid from a run's checkpoints
    Grid {
        /// Run directory; the grid is written there as grid.pgm
        #[arg(long)]
        out: Option<PathBuf>,
        /// A single checkpoint instead of every snapshot in the run
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Manifest for the real reference column
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Artifact, darkness and fidelity metrics for a run's checkpoints
    Eval {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Manifest to fit the centroid classifier on (default: phantoms)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generated samples per class
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every op and the full network composite
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    beta1: Option<f32>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated epochs
    #[arg(long)]
    snapshot_epochs: Option<String>,
    /// Resume from this checkpoint
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

/// Failure of a well-formed command.
#[derive(Debug)]
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

/// Usage problems detected after parsing.
#[derive(Debug)]
enum Exit {
    Usage(String),
    Runtime(Failure),
}

impl From<Failure> for Exit {
    fn from(f: Failure) -> Self {
        Exit::Runtime(f)
    }
}

fn usage(msg: impl Into<String>) -> Exit {
    Exit::Usage(msg.into())
}

/// Runs `pgan` with `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Exit::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            1
        }
        Err(Exit::Runtime(Failure(msg))) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Exit> {
    match cmd {
        Command::Phantom { out, seed, n } => {
            if n == 0 {
                return Err(usage("--n must be positive"));
            }
            let manifest = generate_dataset(n, seed, out_dir(out)).map_err(Failure::from)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train(args) => train_cmd(args),
        Command::Generate {
            ckpt,
            score,
            n,
            seed,
            out,
        } => {
            let label = GleasonLabel::from_score(score).map_err(|e| usage(e.to_string()))?;
            let state = TrainState::load(&ckpt).map_err(Failure::from)?;
            let seed = seed.unwrap_or(state.config.master_seed);
            let out = out_dir(out);
            std::fs::create_dir_all(&out).map_err(|e| Failure(format!("{}: {e}", out.display())))?;
            let mut r = rng::stream(seed, &[rng::TAG_SAMPLES, label.index() as u64]);
            let images = sample_images(&state.gen, &vec![label; n], &mut r).map_err(Failure::from)?;
            for (i, img) in images.iter().enumerate() {
                let path = out.join(format!("gen_s{}_{i:04}.pgm", label.score()));
                crate::data::grid_to_pgm(img).write(&path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Grid { out, ckpt, data } => {
            let out = out_dir(out);
            let mut columns = Vec::new();
            for p in checkpoint_paths(&out, ckpt.as_deref())? {
                let s = TrainState::load(&p).map_err(|e| Failure(format!("{}: {e}", p.display())))?;
                columns.push(s.grid.column(&s.gen).map_err(Failure::from)?);
            }
            if let Some(d) = data {
                columns.push(real_reference(&load(&d)?));
            }
            let path = out.join("grid.pgm");
            compose(&columns).write(&path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Eval {
            out,
            ckpt,
            data,
            n,
            seed,
        } => {
            let out = out_dir(out);
            let paths = checkpoint_paths(&out, ckpt.as_deref())?;
            let fit_set = match data {
                Some(d) => load(&d)?,
                None => phantom_records(CENTROID_PER_CLASS, seed),
            };
            let model = CentroidModel::fit(&fit_set).map_err(Failure::from)?;
            let report = evaluate_checkpoints(&paths, &model, n, seed).map_err(Failure::from)?;
            let csv = report.to_csv();
            let path = out.join("report.csv");
            std::fs::write(&path, &csv).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
            print!("{csv}");
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let reports = crate::gradcheck::suite(seed).map_err(Failure::from)?;
            println!("{:<32} {:>12} {:>8} {:>8}", "check", "max_rel_err", "points", "skipped");
            let mut ok = true;
            for r in &reports {
                let pass = r.passes(GRADCHECK_TOL);
                ok &= pass;
                println!(
                    "{:<32} {:>12.3e} {:>8} {:>8}{}",
                    r.name,
                    r.max_rel_err,
                    r.checked,
                    r.skipped,
                    if pass { "" } else { "  FAIL" }
                );
            }
            if ok {
                Ok(())
            } else {
                Err(Failure(format!("gradient check above {GRADCHECK_TOL}")).into())
            }
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| TrainConfig::default().out_dir)
}

fn load(path: &Path) -> Result<Vec<ImageRecord>, Failure> {
    let records = load_manifest(path).map_err(|e: DataError| Failure(e.to_string()))?;
    if records.is_empty() {
        return Err(Failure(format!("{}: no images", path.display())));
    }
    Ok(records)
}

/// The given checkpoint, or every snapshot checkpoint of the run.
fn checkpoint_paths(dir: &Path, ckpt: Option<&Path>) -> Result<Vec<PathBuf>, Exit> {
    if let Some(p) = ckpt {
        return Ok(vec![p.to_path_buf()]);
    }
    let found = train::list_checkpoints(dir).map_err(Failure::from)?;
    if found.is_empty() {
        return Err(usage(format!("no checkpoints in {}; pass --ckpt or --out", dir.display())));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Applies defaults, the output-directory variable, the config file and
/// flags, in that order.
fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, Exit> {
    let mut cfg = TrainConfig::default();
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        cfg.out_dir = PathBuf::from(dir);
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    apply_flags(&mut cfg, args)?;
    Ok(cfg)
}

fn apply_flags(cfg: &mut TrainConfig, args: &TrainArgs) -> Result<(), Exit> {
    let flags: [(&str, Option<String>); 9] = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("z_dim", args.z_dim.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("beta1", args.beta1.map(|v| v.to_string())),
        ("data", args.data.as_ref().map(|p| p.display().to_string())),
        ("out", args.out.as_ref().map(|p| p.display().to_string())),
        ("snapshot_epochs", args.snapshot_epochs.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(|e| usage(e.to_string()))?;
        }
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), Exit> {
    let state = match &args.ckpt {
        None => {
            let cfg = resolve_config(&args)?;
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            TrainState::new(cfg).map_err(Failure::from)?
        }
        Some(path) => {
            // the run's own configuration; only the length, schedule and
            // file locations may change
            let fixed = [
                ("--config", args.config.is_some()),
                ("--seed", args.seed.is_some()),
                ("--batch-size", args.batch_size.is_some()),
                ("--z-dim", args.z_dim.is_some()),
                ("--lr", args.lr.is_some()),
                ("--beta1", args.beta1.is_some()),
            ];
            if let Some((flag, _)) = fixed.iter().find(|(_, set)| *set) {
                return Err(usage(format!("{flag} cannot be changed when resuming with --ckpt")));
            }
            let mut state = TrainState::load(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
            apply_flags(&mut state.config, &args)?;
            state.config.validate().map_err(|e| usage(e.to_string()))?;
            state
        }
    };
    let data = state
        .config
        .data
        .clone()
        .ok_or_else(|| usage("no dataset: pass --data or set `data` in the config file"))?;
    let records = load(&data)?;
    eprintln!(
        "training on {} images for epochs {}..={} into {}",
        records.len(),
        state.epoch + 1,
        state.config.epochs,
        state.config.out_dir.display()
    );
    let summary = train::run(state, &records, &mut |row: &LossRow| println!("{}", row.progress()))
        .map_err(Failure::from)?;
    eprintln!("snapshots at epochs {:?}", summary.snapshots);
    Ok(())
}

