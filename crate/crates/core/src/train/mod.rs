//! Adversarial training: one discriminator step then one generator step per
//! batch, fixed-noise evaluation grids at snapshot epochs, loss logging and
//! resumable checkpoints.
//!
//! Run directory layout:
//!
//! - `config.echo`: effective configuration
//! - `losses.csv`: `epoch,batch,d_loss,g_loss`, one row per batch
//! - `ckpt_eNNN.pgan`: checkpoint after epoch NNN (snapshot epochs)
//! - `tiles_eNNN.pgm`: the snapshot's grid column
//! - `grid_eNNN.pgm`: all columns so far plus the real reference column
//! - `grid.pgm`: the final grid

pub mod checkpoint;
pub mod config;
pub mod grid;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, RngState};
pub use config::{ConfigError, TrainConfig};
pub use grid::{compose, emit_epoch_grid, real_reference, split_column, Column, EvalGrid};

use crate::data::{batch_iter, Batch, DataError, GrayImage, ImageRecord, PgmError};
use crate::nets::{Discriminator, Generator, GleasonLabel, NetError, Network, Pass};
use crate::optim::{adam_step, AdamState, OptimError};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Pgm { path: PathBuf, source: PgmError },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{network} loss is not finite ({value})")]
    NonFiniteLoss { network: &'static str, value: f32 },
    #[error("epoch {epoch} batch {batch}: {source}")]
    Diverged {
        epoch: u32,
        batch: usize,
        source: Box<TrainError>,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Net(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `[n, z_dim]` i.i.d. Uniform(−1, 1).
pub fn sample_noise<R: Rng + ?Sized>(n: usize, z_dim: usize, rng: &mut R) -> Tensor {
    let data = (0..n * z_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(&[n, z_dim], data).expect("noise shape is positive")
}

/// How fake labels are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelSampler {
    /// Uniform over the nine classes.
    #[default]
    Uniform,
    Fixed(GleasonLabel),
}

impl LabelSampler {
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<GleasonLabel> {
        match self {
            LabelSampler::Uniform => (0..n).map(|_| GleasonLabel::sample(rng)).collect(),
            LabelSampler::Fixed(l) => vec![l; n],
        }
    }
}

fn targets(tape: &mut Tape, n: usize, value: f32) -> Result<crate::tensor::Var, TensorError> {
    tape.constant(&[n, 1], vec![value; n])
}

fn finite(network: &'static str, value: f32) -> Result<f32, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFiniteLoss { network, value })
    }
}

/// `BCE(D(x, y), 1) + BCE(D(G(z, y'), y'), 0)` followed by one Adam step on D.
///
/// G runs on batch statistics without touching its parameters or running
/// statistics.
pub fn train_step_discriminator<R: Rng + ?Sized>(
    gen: &mut Generator,
    disc: &mut Discriminator,
    batch: &Batch,
    opt_d: &mut AdamState,
    rng: &mut R,
) -> Result<f32, TrainError> {
    let n = batch.labels.len();
    let z = sample_noise(n, gen.arch().z_dim, rng);
    let fake_labels = LabelSampler::Uniform.sample(n, rng);

    let mut tape = Tape::new();
    let zv = tape.constant(&[z.shape()[0], z.shape()[1]], z.into_data())?;
    let fake = gen.forward(&mut tape, zv, &fake_labels, Pass::FROZEN)?.out;
    let real = tape.leaf(&batch.images);
    let d_real = disc.forward(&mut tape, real, &batch.labels, Pass::TRAIN)?;
    let d_fake = disc.forward(&mut tape, fake, &fake_labels, Pass::TRAIN)?;
    let (ones, zeros) = (targets(&mut tape, n, 1.0)?, targets(&mut tape, n, 0.0)?);
    let l_real = tape.bce_loss(d_real.out, ones)?;
    let l_fake = tape.bce_loss(d_fake.out, zeros)?;
    let loss = tape.add(l_real, l_fake)?;
    let value = finite("discriminator", tape.value(loss)[0])?;
    tape.backward(loss)?;

    disc.zero_grads();
    disc.absorb_grads(&tape, &d_real);
    disc.absorb_grads(&tape, &d_fake);
    adam_step(&mut disc.params_mut(), opt_d)?;
    Ok(value)
}

/// Non-saturating `BCE(D(G(z, y), y), 1)` followed by one Adam step on G.
///
/// D runs on batch statistics without touching its parameters or running
/// statistics.
pub fn train_step_generator<R: Rng + ?Sized>(
    gen: &mut Generator,
    disc: &mut Discriminator,
    batch_size: usize,
    labels: LabelSampler,
    opt_g: &mut AdamState,
    rng: &mut R,
) -> Result<f32, TrainError> {
    let z = sample_noise(batch_size, gen.arch().z_dim, rng);
    let y = labels.sample(batch_size, rng);

    let mut tape = Tape::new();
    let zv = tape.constant(&[z.shape()[0], z.shape()[1]], z.into_data())?;
    let g = gen.forward(&mut tape, zv, &y, Pass::TRAIN)?;
    let d = disc.forward(&mut tape, g.out, &y, Pass::FROZEN)?;
    let ones = targets(&mut tape, batch_size, 1.0)?;
    let loss = tape.bce_loss(d.out, ones)?;
    let value = finite("generator", tape.value(loss)[0])?;
    tape.backward(loss)?;

    gen.zero_grads();
    gen.absorb_grads(&tape, &g);
    adam_step(&mut gen.params_mut(), opt_g)?;
    Ok(value)
}

/// One logged batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: u32,
    pub batch: usize,
    pub d_loss: f32,
    pub g_loss: f32,
}

impl LossRow {
    pub const HEADER: &'static str = "epoch,batch,d_loss,g_loss";

    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.batch, self.d_loss, self.g_loss)
    }

    /// The machine-readable progress line.
    pub fn progress(&self) -> String {
        format!(
            "epoch={} batch={} d_loss={} g_loss={}",
            self.epoch, self.batch, self.d_loss, self.g_loss
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split(',');
        let row = Self {
            epoch: it.next()?.parse().ok()?,
            batch: it.next()?.parse().ok()?,
            d_loss: it.next()?.parse().ok()?,
            g_loss: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(row)
    }
}

/// Reads a loss log written by [`train`].
pub fn read_losses(path: impl AsRef<Path>) -> Result<Vec<LossRow>, TrainError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            LossRow::parse(l).ok_or_else(|| TrainError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad row {l:?}")),
            })
        })
        .collect()
}

/// Everything a run carries between batches.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    /// Stream for noise and fake labels.
    pub rng: ChaCha8Rng,
    pub grid: EvalGrid,
    /// Completed epochs.
    pub epoch: u32,
}

const GRID_Z: &str = "grid.z";

fn stats_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.stats{i}.mean"), format!("{prefix}.stats{i}.var"))
}

fn network_tensors<N: Network>(prefix: &str, net: &N, out: &mut Vec<(String, Tensor)>) {
    for (name, t) in net.named_params() {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
    for (i, s) in net.running_stats().iter().enumerate() {
        let (m, v) = stats_names(prefix, i);
        out.push((m, Tensor::new(&[s.mean.len()], s.mean.clone()).expect("channels > 0")));
        out.push((v, Tensor::new(&[s.var.len()], s.var.clone()).expect("channels > 0")));
    }
}

fn restore_network<N: Network>(prefix: &str, net: &mut N, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let find = |name: &str, shape: &[usize]| -> Result<Vec<f32>, CheckpointError> {
        let t = ckpt
            .tensor(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(CheckpointError::Corrupt(format!(
                "{name}: expected shape {shape:?}, found {:?}",
                t.shape()
            )));
        }
        Ok(t.data().to_vec())
    };
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(net.params_mut()) {
        let data = find(&format!("{prefix}.{name}"), &p.shape().to_vec())?;
        p.data_mut().copy_from_slice(&data);
    }
    for (i, s) in net.running_stats_mut().iter_mut().enumerate() {
        let (m, v) = stats_names(prefix, i);
        s.mean = find(&m, &[s.mean.len()])?;
        s.var = find(&v, &[s.var.len()])?;
    }
    Ok(())
}

impl TrainState {
    /// Fresh networks, optimizers and streams derived from the master seed.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let seed = config.master_seed;
        let arch = config.arch();
        let gen = Generator::new(&arch, &mut rng::stream(seed, &[rng::TAG_GENERATOR_INIT]))?;
        let disc = Discriminator::new(&arch, &mut rng::stream(seed, &[rng::TAG_DISCRIMINATOR_INIT]))?;
        let opt_g = AdamState::for_params(config.adam(), gen.named_params().into_iter().map(|(_, t)| t));
        let opt_d = AdamState::for_params(config.adam(), disc.named_params().into_iter().map(|(_, t)| t));
        let grid = EvalGrid::sample(arch.z_dim, &mut rng::stream(seed, &[rng::TAG_EVAL_GRID]));
        Ok(Self {
            rng: rng::stream(seed, &[rng::TAG_TRAIN]),
            config,
            gen,
            disc,
            opt_g,
            opt_d,
            grid,
            epoch: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        network_tensors("G", &self.gen, &mut tensors);
        network_tensors("D", &self.disc, &mut tensors);
        tensors.push((GRID_Z.to_string(), self.grid.z.clone()));
        Checkpoint {
            epoch: self.epoch,
            config_echo: self.config.echo(),
            tensors,
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config = TrainConfig::from_text(&ckpt.config_echo)?;
        let mut state = Self::new(config)?;
        restore_network("G", &mut state.gen, ckpt)?;
        restore_network("D", &mut state.disc, ckpt)?;
        let z = ckpt
            .tensor(GRID_Z)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {GRID_Z}")))?;
        if z.shape() != state.grid.z.shape() {
            return Err(CheckpointError::Corrupt(format!("{GRID_Z}: shape {:?}", z.shape())).into());
        }
        state.grid.z = z.clone();
        for (name, saved, fresh) in [("G", &ckpt.opt_g, &state.opt_g), ("D", &ckpt.opt_d, &state.opt_d)] {
            let sizes = |s: &AdamState| s.m.iter().map(Vec::len).collect::<Vec<_>>();
            if sizes(saved) != sizes(fresh) || saved.v.len() != saved.m.len() {
                return Err(CheckpointError::Corrupt(format!("{name} optimizer state does not match")).into());
            }
        }
        state.opt_g = ckpt.opt_g.clone();
        state.opt_d = ckpt.opt_d.clone();
        state.rng = ckpt.rng.restore();
        state.epoch = ckpt.epoch;
        Ok(state)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Runs every batch of the next epoch.
    pub fn run_epoch(
        &mut self,
        dataset: &[ImageRecord],
        on_batch: &mut dyn FnMut(&LossRow),
    ) -> Result<Vec<LossRow>, TrainError> {
        let epoch = self.epoch + 1;
        let mut rows = Vec::new();
        for batch in batch_iter(dataset, self.config.batch_size, epoch, self.config.master_seed) {
            let b = batch.batch_index;
            let wrap = |e: TrainError| TrainError::Diverged {
                epoch,
                batch: b,
                source: Box::new(e),
            };
            let d_loss = train_step_discriminator(&mut self.gen, &mut self.disc, &batch, &mut self.opt_d, &mut self.rng)
                .map_err(wrap)?;
            let n = batch.labels.len();
            let g_loss = train_step_generator(
                &mut self.gen,
                &mut self.disc,
                n,
                LabelSampler::Uniform,
                &mut self.opt_g,
                &mut self.rng,
            )
            .map_err(wrap)?;
            let row = LossRow {
                epoch,
                batch: b,
                d_loss,
                g_loss,
            };
            on_batch(&row);
            rows.push(row);
        }
        self.epoch = epoch;
        Ok(rows)
    }
}

pub fn checkpoint_path(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join(format!("ckpt_e{epoch:03}.pgan"))
}

pub fn tiles_path(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join(format!("tiles_e{epoch:03}.pgm"))
}

pub fn grid_path(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join(format!("grid_e{epoch:03}.pgm"))
}

/// Snapshot checkpoints (`ckpt_eNNN.pgan`) in `dir`, in epoch order.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u32, PathBuf)>, TrainError> {
    let mut found: Vec<(u32, PathBuf)> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let epoch = name.strip_prefix("ckpt_e")?.strip_suffix(".pgan")?.parse().ok()?;
            Some((epoch, p))
        })
        .collect();
    found.sort();
    Ok(found)
}

fn write_pgm(img: &GrayImage, path: PathBuf) -> Result<(), TrainError> {
    img.write(&path).map_err(|source| TrainError::Pgm { path, source })
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    /// Rows logged by this invocation (a resumed run omits earlier epochs).
    pub losses: Vec<LossRow>,
    pub snapshots: Vec<u32>,
    pub state: TrainState,
}

/// Trains from scratch into `config.out_dir`.
pub fn train(
    config: &TrainConfig,
    dataset: &[ImageRecord],
    on_batch: &mut dyn FnMut(&LossRow),
) -> Result<RunSummary, TrainError> {
    let state = TrainState::new(config.clone())?;
    run(state, dataset, on_batch)
}

/// Continues a run from `state`, appending to the run directory. Loss rows
/// logged after the state's epoch are discarded first, so an interrupted run
/// resumes into the same files an uninterrupted run would produce.
pub fn run(
    mut state: TrainState,
    dataset: &[ImageRecord],
    on_batch: &mut dyn FnMut(&LossRow),
) -> Result<RunSummary, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let out = state.config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let echo_path = out.join("config.echo");
    std::fs::write(&echo_path, state.config.echo()).map_err(io_err(&echo_path))?;

    let csv_path = out.join("losses.csv");
    let mut csv = format!("{}\n", LossRow::HEADER);
    if state.epoch > 0 {
        for row in read_losses(&csv_path)?.into_iter().filter(|r| r.epoch <= state.epoch) {
            writeln!(csv, "{}", row.csv()).expect("string write");
        }
    }
    std::fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;

    let snapshots = state.config.snapshots();
    let refs = real_reference(dataset);
    let mut columns = Vec::new();
    for &e in snapshots.iter().filter(|&&e| e <= state.epoch) {
        let p = tiles_path(&out, e);
        let img = GrayImage::read(&p).map_err(|source| TrainError::Pgm { path: p.clone(), source })?;
        let col = split_column(&img, crate::data::CANVAS).ok_or_else(|| TrainError::Pgm {
            path: p,
            source: PgmError::Header("not a tile column".into()),
        })?;
        columns.push(col);
    }

    let mut losses = Vec::new();
    while state.epoch < state.config.epochs {
        let rows = state.run_epoch(dataset, on_batch)?;
        let mut text = String::new();
        for r in &rows {
            writeln!(text, "{}", r.csv()).expect("string write");
        }
        csv.push_str(&text);
        std::fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;
        losses.extend(rows);

        let e = state.epoch;
        if snapshots.contains(&e) {
            let grid = emit_epoch_grid(&state.gen, &state.grid, &mut columns, Some(&refs))?;
            let column = compose(&columns[columns.len() - 1..]);
            write_pgm(&column, tiles_path(&out, e))?;
            write_pgm(&grid, grid_path(&out, e))?;
            state.to_checkpoint().save(checkpoint_path(&out, e))?;
        }
    }
    if !columns.is_empty() {
        let mut all = columns;
        all.push(refs);
        write_pgm(&compose(&all), out.join("grid.pgm"))?;
    }
    Ok(RunSummary {
        out_dir: out,
        losses,
        snapshots,
        state,
    })
}
