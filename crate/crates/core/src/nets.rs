//! Class labels and the conditional generator / discriminator.
//!
//! The generator maps `concat(z, one_hot(y))` through a dense projection to a
//! `c0×s0×s0` feature map and then doubles the spatial size with a ladder of
//! 4×4 stride-2 transposed convolutions until it reaches the image size. The
//! discriminator mirrors it with 4×4 stride-2 convolutions over the image
//! stacked with one constant plane per class.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Activation, BatchNormMode, Real, RunningStats, Tape, Tensor, TensorError, Var};

/// Gleason scores in class-index order. Score 1 is not used.
pub const SCORES: [u8; 9] = [0, 2, 3, 4, 5, 6, 7, 8, 9];
pub const N_CLASSES: usize = SCORES.len();

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("score {0} not in label set")]
    UnknownScore(i64),
    #[error("class index {0} out of range")]
    BadIndex(usize),
}

/// A Gleason score with its fixed class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GleasonLabel(u8);

impl GleasonLabel {
    pub fn from_score(score: i64) -> Result<Self, LabelError> {
        SCORES
            .iter()
            .position(|&s| s as i64 == score)
            .map(|i| Self(i as u8))
            .ok_or(LabelError::UnknownScore(score))
    }

    pub fn from_index(index: usize) -> Result<Self, LabelError> {
        if index < N_CLASSES {
            Ok(Self(index as u8))
        } else {
            Err(LabelError::BadIndex(index))
        }
    }

    pub fn score(self) -> u8 {
        SCORES[self.0 as usize]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// All labels in ascending score order.
    pub fn all() -> impl Iterator<Item = Self> {
        (0..N_CLASSES as u8).map(Self)
    }

    pub fn one_hot(self) -> [f32; N_CLASSES] {
        let mut v = [0.0; N_CLASSES];
        v[self.index()] = 1.0;
        v
    }

    /// Draws a label uniformly over the classes.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.gen_range(0..N_CLASSES as u8))
    }
}

impl std::fmt::Display for GleasonLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.score())
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Input {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Architecture and initialization hyperparameters shared by G and D.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub z_dim: usize,
    pub image_size: usize,
    /// Generator channel widths from coarsest to finest; the discriminator
    /// uses them in reverse.
    pub widths: Vec<usize>,
    pub leaky_slope: f32,
    pub init_std: f32,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            z_dim: 100,
            image_size: 32,
            widths: vec![256, 128, 64],
            leaky_slope: 0.2,
            init_std: 0.02,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.z_dim == 0 {
            return Err(NetError::Arch("z_dim must be at least 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(NetError::Arch(format!("bad widths {:?}", self.widths)));
        }
        let scale = 1usize << self.widths.len();
        if self.image_size % scale != 0 || self.image_size < scale {
            return Err(NetError::Arch(format!(
                "image size {} is not reachable from {} doublings",
                self.image_size,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// Spatial size of the coarsest feature map.
    pub fn base_size(&self) -> usize {
        self.image_size >> self.widths.len()
    }

    /// Spatial sizes along the generator ladder, coarsest first.
    pub fn generator_sizes(&self) -> Vec<usize> {
        (0..=self.widths.len()).map(|i| self.base_size() << i).collect()
    }

    /// Spatial sizes along the discriminator ladder, input first.
    pub fn discriminator_sizes(&self) -> Vec<usize> {
        let mut s = self.generator_sizes();
        s.reverse();
        s
    }

    fn leaky(&self) -> Activation {
        Activation::LeakyRelu(self.leaky_slope)
    }
}

/// I.i.d. `N(0, std²)` entries.
pub fn init_weights<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data)
        .expect("init shape must be positive")
        .requiring_grad()
}

fn param_zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requiring_grad()
}

/// How a forward pass treats batch norm and parameter gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    /// Batch statistics (true) or running statistics (false).
    pub train: bool,
    /// Fold batch statistics into the running statistics.
    pub update_stats: bool,
    /// Record parameters as differentiable leaves.
    pub param_grads: bool,
}

impl Pass {
    /// The pass of the network being optimized.
    pub const TRAIN: Pass = Pass {
        train: true,
        update_stats: true,
        param_grads: true,
    };
    /// Batch-statistics pass through a network held fixed by the current step.
    pub const FROZEN: Pass = Pass {
        train: true,
        update_stats: false,
        param_grads: false,
    };
    pub const EVAL: Pass = Pass {
        train: false,
        update_stats: false,
        param_grads: false,
    };
}

/// Result of a forward pass: the output and the tape handles of every
/// parameter, in [`Network::params_mut`] order (empty without gradients).
#[derive(Debug, Clone)]
pub struct Forward {
    pub out: Var,
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNormParams {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], 1.0).requiring_grad(),
            beta: param_zeros(&[c]),
        }
    }
}

/// Parameter container behaviour shared by both networks.
pub trait Network {
    /// Trainable tensors with stable names, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn running_stats(&self) -> &[RunningStats];
    fn running_stats_mut(&mut self) -> &mut [RunningStats];

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds the tape gradients of a forward pass into the parameters.
    fn absorb_grads(&mut self, tape: &Tape, fwd: &Forward) {
        let params = self.params_mut();
        assert_eq!(params.len(), fwd.params.len(), "forward was run without gradients");
        for (p, &v) in params.into_iter().zip(&fwd.params) {
            tape.accumulate_into(v, p);
        }
    }
}

struct Binder {
    grads: bool,
    vars: Vec<Var>,
}

impl Binder {
    fn bind<T: Real>(&mut self, tape: &mut Tape<T>, t: &Tensor) -> Var {
        if self.grads {
            let v = tape.leaf(t);
            self.vars.push(v);
            v
        } else {
            tape.constant(t.shape(), t.data().to_vec())
                .expect("parameter shapes are valid")
        }
    }
}

fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    x: Var,
    bn: &BatchNormParams,
    stats: &mut RunningStats,
    pass: Pass,
    eps: f32,
) -> Result<Var, TensorError> {
    let gamma = binder.bind(tape, &bn.gamma);
    let beta = binder.bind(tape, &bn.beta);
    let mode = match (pass.train, pass.update_stats) {
        (true, true) => BatchNormMode::Train(Some(stats)),
        (true, false) => BatchNormMode::Train(None),
        (false, _) => BatchNormMode::Eval(stats),
    };
    tape.batch_norm2d(x, gamma, beta, eps, mode)
}

fn fresh_stats(widths: &[usize], momentum: f32) -> Vec<RunningStats> {
    widths
        .iter()
        .map(|&c| RunningStats::new(c, momentum))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `[z_dim + N_CLASSES, c0·s0·s0]`
    pub proj_w: Tensor,
    /// One per hidden block: after the projection and after every
    /// transposed convolution except the last.
    pub bn: Vec<BatchNormParams>,
    /// `[c_i, c_{i+1}, 4, 4]`, the last one producing a single channel.
    pub deconv_w: Vec<Tensor>,
    pub out_b: Tensor,
}

/// Conditional generator `G(z, y) → [N, 1, S, S]` with a tanh head.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    arch: ArchConfig,
    pub params: GeneratorParams,
    stats: Vec<RunningStats>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, NetError> {
        arch.validate()?;
        let w = &arch.widths;
        let s0 = arch.base_size();
        let std = arch.init_std;
        let proj_w = init_weights(&[arch.z_dim + N_CLASSES, w[0] * s0 * s0], std, rng);
        let mut outs = w[1..].to_vec();
        outs.push(1);
        let deconv_w = w
            .iter()
            .zip(&outs)
            .map(|(&cin, &cout)| init_weights(&[cin, cout, KERNEL, KERNEL], std, rng))
            .collect();
        Ok(Self {
            params: GeneratorParams {
                proj_w,
                bn: w.iter().map(|&c| BatchNormParams::new(c)).collect(),
                deconv_w,
                out_b: param_zeros(&[1]),
            },
            stats: fresh_stats(w, arch.bn_momentum),
            arch: arch.clone(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Records `G(z, y)` on `tape`; `z` must be `[N, z_dim]` with `N = labels.len()`.
    pub fn forward<T: Real>(
        &mut self,
        tape: &mut Tape<T>,
        z: Var,
        labels: &[GleasonLabel],
        pass: Pass,
    ) -> Result<Forward, NetError> {
        Self::run(&self.arch, &self.params, &mut self.stats, tape, z, labels, pass)
    }

    /// Eval-mode generation without touching any state.
    pub fn generate(&self, z: &Tensor, labels: &[GleasonLabel]) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.shape(), z.data().to_vec())?;
        let mut stats = self.stats.clone();
        let fwd = Self::run(&self.arch, &self.params, &mut stats, &mut tape, zv, labels, Pass::EVAL)?;
        Ok(tape.to_tensor(fwd.out))
    }

    fn run<T: Real>(
        arch: &ArchConfig,
        p: &GeneratorParams,
        stats: &mut [RunningStats],
        tape: &mut Tape<T>,
        z: Var,
        labels: &[GleasonLabel],
        pass: Pass,
    ) -> Result<Forward, NetError> {
        let n = labels.len();
        if tape.shape(z) != [n, arch.z_dim] {
            return Err(NetError::Input {
                what: "generator noise",
                expected: vec![n, arch.z_dim],
                got: tape.shape(z).to_vec(),
            });
        }
        let mut binder = Binder {
            grads: pass.param_grads,
            vars: Vec::new(),
        };
        let onehot: Vec<f32> = labels.iter().flat_map(|l| l.one_hot()).collect();
        let y = tape.constant(&[n, N_CLASSES], onehot)?;
        let h = tape.concat(&[z, y], 1)?;
        let w = binder.bind(tape, &p.proj_w);
        let h = tape.matmul(h, w)?;
        let s0 = arch.base_size();
        let mut h = tape.reshape(h, &[n, arch.widths[0], s0, s0])?;
        let last = p.deconv_w.len() - 1;
        for (i, dw) in p.deconv_w.iter().enumerate() {
            h = batch_norm(tape, &mut binder, h, &p.bn[i], &mut stats[i], pass, arch.bn_eps)?;
            h = tape.activation(h, arch.leaky());
            let w = binder.bind(tape, dw);
            let b = (i == last).then(|| binder.bind(tape, &p.out_b));
            h = tape.conv_transpose2d(h, w, b, STRIDE, PAD)?;
        }
        let out = tape.activation(h, Activation::Tanh);
        Ok(Forward {
            out,
            params: binder.vars,
        })
    }
}

impl Network for Generator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let p = &self.params;
        let mut v = vec![("proj.w".to_string(), &p.proj_w)];
        for (i, dw) in p.deconv_w.iter().enumerate() {
            v.push((format!("bn{i}.gamma"), &p.bn[i].gamma));
            v.push((format!("bn{i}.beta"), &p.bn[i].beta));
            v.push((format!("deconv{i}.w"), dw));
        }
        v.push((format!("deconv{}.b", p.deconv_w.len() - 1), &p.out_b));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let p = &mut self.params;
        let mut v = vec![&mut p.proj_w];
        for (bn, dw) in p.bn.iter_mut().zip(p.deconv_w.iter_mut()) {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
            v.push(dw);
        }
        v.push(&mut p.out_b);
        v
    }

    fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    /// `[c_{i+1}, c_i, 4, 4]`; the first takes `1 + N_CLASSES` channels.
    pub conv_w: Vec<Tensor>,
    /// Bias of the first convolution (the only one without batch norm).
    pub conv0_b: Tensor,
    /// Batch norm after every convolution except the first.
    pub bn: Vec<BatchNormParams>,
    /// `[c_last·s0·s0, 1]`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Conditional discriminator `D(x, y) → [N, 1]` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    arch: ArchConfig,
    pub params: DiscriminatorParams,
    stats: Vec<RunningStats>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, NetError> {
        arch.validate()?;
        let mut chans: Vec<usize> = arch.widths.iter().rev().copied().collect();
        chans.insert(0, 1 + N_CLASSES);
        let std = arch.init_std;
        let conv_w = chans
            .windows(2)
            .map(|c| init_weights(&[c[1], c[0], KERNEL, KERNEL], std, rng))
            .collect();
        let s0 = arch.base_size();
        let head_w = init_weights(&[arch.widths[0] * s0 * s0, 1], std, rng);
        let bn_widths = &chans[2..];
        Ok(Self {
            params: DiscriminatorParams {
                conv_w,
                conv0_b: param_zeros(&[chans[1]]),
                bn: bn_widths.iter().map(|&c| BatchNormParams::new(c)).collect(),
                head_w,
                head_b: param_zeros(&[1]),
            },
            stats: fresh_stats(bn_widths, arch.bn_momentum),
            arch: arch.clone(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Records `D(x, y)` on `tape`; `x` must be `[N, 1, S, S]`.
    pub fn forward<T: Real>(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        labels: &[GleasonLabel],
        pass: Pass,
    ) -> Result<Forward, NetError> {
        Self::run(&self.arch, &self.params, &mut self.stats, tape, x, labels, pass)
    }

    /// Eval-mode probabilities without touching any state.
    pub fn classify(&self, x: &Tensor, labels: &[GleasonLabel]) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.shape(), x.data().to_vec())?;
        let mut stats = self.stats.clone();
        let fwd = Self::run(&self.arch, &self.params, &mut stats, &mut tape, xv, labels, Pass::EVAL)?;
        Ok(tape.to_tensor(fwd.out))
    }

    fn run<T: Real>(
        arch: &ArchConfig,
        p: &DiscriminatorParams,
        stats: &mut [RunningStats],
        tape: &mut Tape<T>,
        x: Var,
        labels: &[GleasonLabel],
        pass: Pass,
    ) -> Result<Forward, NetError> {
        let n = labels.len();
        let s = arch.image_size;
        if tape.shape(x) != [n, 1, s, s] {
            return Err(NetError::Input {
                what: "discriminator image",
                expected: vec![n, 1, s, s],
                got: tape.shape(x).to_vec(),
            });
        }
        let mut binder = Binder {
            grads: pass.param_grads,
            vars: Vec::new(),
        };
        let plane = s * s;
        let mut planes = vec![0.0f32; n * N_CLASSES * plane];
        for (i, l) in labels.iter().enumerate() {
            planes[(i * N_CLASSES + l.index()) * plane..][..plane].fill(1.0);
        }
        let y = tape.constant(&[n, N_CLASSES, s, s], planes)?;
        let mut h = tape.concat(&[x, y], 1)?;
        for (i, cw) in p.conv_w.iter().enumerate() {
            let w = binder.bind(tape, cw);
            if i == 0 {
                let b = binder.bind(tape, &p.conv0_b);
                h = tape.conv2d(h, w, Some(b), STRIDE, PAD)?;
            } else {
                h = tape.conv2d(h, w, None, STRIDE, PAD)?;
                h = batch_norm(tape, &mut binder, h, &p.bn[i - 1], &mut stats[i - 1], pass, arch.bn_eps)?;
            }
            h = tape.activation(h, arch.leaky());
        }
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[n, flat])?;
        let w = binder.bind(tape, &p.head_w);
        let b = binder.bind(tape, &p.head_b);
        let h = tape.matmul(h, w)?;
        let h = tape.bias_add(h, b)?;
        let out = tape.activation(h, Activation::Sigmoid);
        Ok(Forward {
            out,
            params: binder.vars,
        })
    }
}

impl Network for Discriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let p = &self.params;
        let mut v = Vec::new();
        for (i, cw) in p.conv_w.iter().enumerate() {
            v.push((format!("conv{i}.w"), cw));
            if i == 0 {
                v.push(("conv0.b".to_string(), &p.conv0_b));
            } else {
                v.push((format!("bn{i}.gamma"), &p.bn[i - 1].gamma));
                v.push((format!("bn{i}.beta"), &p.bn[i - 1].beta));
            }
        }
        v.push(("head.w".to_string(), &p.head_w));
        v.push(("head.b".to_string(), &p.head_b));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let p = &mut self.params;
        let mut v = Vec::new();
        let mut convs = p.conv_w.iter_mut();
        v.push(convs.next().expect("at least one conv"));
        v.push(&mut p.conv0_b);
        for (cw, bn) in convs.zip(p.bn.iter_mut()) {
            v.push(cw);
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v.push(&mut p.head_w);
        v.push(&mut p.head_b);
        v
    }

    fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }
}
