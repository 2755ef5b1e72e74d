//! Central finite-difference verification of the autodiff tape.
//!
//! The analytic gradient comes from the ordinary `f32` tape. The oracle
//! perturbs one `f32` input coordinate at a time and re-runs the same forward
//! code on an `f64` tape, so the difference quotient is not swamped by `f32`
//! rounding. Coordinates whose perturbation moves any recorded non-smooth op
//! (leaky ReLU, BCE clamp) across its kink are skipped and counted, since the
//! derivative is not defined across them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nets::{
    ArchConfig, Discriminator, Forward, Generator, GleasonLabel, NetError, Network, Pass,
};
use crate::tensor::{Activation, BatchNormMode, Real, Result, RunningStats, Tape, Tensor, Var};

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.checked += 1;
    }
}

/// A function of one tensor, recordable on a tape of any precision.
pub trait TapeFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

fn projection(n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![1.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0F_D1FF);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Checks `f` at `x` against every coordinate of `x`.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random projection
/// `L = Σ rᵢ·outᵢ`, so every output element contributes to the check.
pub fn check_input<F: TapeFn>(f: &F, x: &Tensor, eps: f32) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().requiring_grad());
    let out = f.eval(&mut tape, xv)?;
    let r = projection(tape.value(out).len());
    tape.backward_with(out, r.clone())?;
    let analytic = tape.grad(xv).expect("input requires grad").to_vec();
    let base_sig = tape.branch_signature();

    let probe = |x: &Tensor| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::<f64>::default();
        let xv = tape.leaf(x);
        let out = f.eval(&mut tape, xv)?;
        let loss = tape.value(out).iter().zip(&r).map(|(&o, &w)| o * w as f64).sum();
        Ok((loss, tape.branch_signature()))
    };
    let mut report = GradCheckReport::new("");
    let mut xp = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = x.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        xp.data_mut()[i] = hi;
        let (lp, sp) = probe(&xp)?;
        xp.data_mut()[i] = lo;
        let (lm, sm) = probe(&xp)?;
        xp.data_mut()[i] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        report.record(a as f64, (lp - lm) / (hi as f64 - lo as f64));
    }
    Ok(report)
}

/// [`check_input`] reduced to the maximum relative error.
pub fn finite_diff_check<F: TapeFn>(f: &F, x: &Tensor, eps: f32) -> Result<f64> {
    Ok(check_input(f, x, eps)?.max_rel_err)
}

/// A differentiable tape operation with its non-tensor arguments.
#[derive(Debug, Clone)]
pub enum OpCase {
    Add,
    Sub,
    Mul,
    Scale(f32),
    MatMul,
    BiasAdd,
    /// Arguments `[x, w, b]`.
    Conv2d { stride: usize, pad: usize },
    /// Arguments `[x, w, b]`.
    ConvTranspose2d { stride: usize, pad: usize },
    /// Arguments `[x, gamma, beta]`; eval mode when `stats` is given.
    BatchNorm { eps: f32, stats: Option<RunningStats> },
    Act(Activation),
    Concat(usize),
    /// Arguments `[pred, target]`.
    Bce,
    Mean,
    Reshape(Vec<usize>),
}

impl OpCase {
    pub fn apply<T: Real>(&self, t: &mut Tape<T>, a: &[Var]) -> Result<Var> {
        match self {
            OpCase::Add => t.add(a[0], a[1]),
            OpCase::Sub => t.sub(a[0], a[1]),
            OpCase::Mul => t.mul(a[0], a[1]),
            OpCase::Scale(s) => Ok(t.scale(a[0], *s)),
            OpCase::MatMul => t.matmul(a[0], a[1]),
            OpCase::BiasAdd => t.bias_add(a[0], a[1]),
            OpCase::Conv2d { stride, pad } => t.conv2d(a[0], a[1], Some(a[2]), *stride, *pad),
            OpCase::ConvTranspose2d { stride, pad } => {
                t.conv_transpose2d(a[0], a[1], Some(a[2]), *stride, *pad)
            }
            OpCase::BatchNorm { eps, stats } => {
                let mode = match stats {
                    Some(s) => BatchNormMode::Eval(s),
                    None => BatchNormMode::Train(None),
                };
                t.batch_norm2d(a[0], a[1], a[2], *eps, mode)
            }
            OpCase::Act(kind) => Ok(t.activation(a[0], *kind)),
            OpCase::Concat(axis) => t.concat(a, *axis),
            OpCase::Bce => t.bce_loss(a[0], a[1]),
            OpCase::Mean => Ok(t.reduce_mean(a[0])),
            OpCase::Reshape(shape) => t.reshape(a[0], shape),
        }
    }
}

/// `case` applied to `inputs` as a function of `inputs[wrt]` alone.
pub struct OpProbe<'a> {
    pub case: &'a OpCase,
    pub inputs: &'a [Tensor],
    pub wrt: usize,
}

impl TapeFn for OpProbe<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut args = Vec::with_capacity(self.inputs.len());
        for (i, t) in self.inputs.iter().enumerate() {
            args.push(if i == self.wrt {
                x
            } else {
                tape.constant(t.shape(), t.data().to_vec())?
            });
        }
        self.case.apply(tape, &args)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Uniform in `±[min_abs, 1]`, keeping samples away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(min_abs..1.0f32);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Per-op checks for one seed. Each report names the op and the input it was
/// differentiated against.
pub fn op_reports(seed: u64, eps: f32) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize], lo: f32, hi: f32| uniform(&mut rng, shape, lo, hi);

    let a = u(&[3, 4], -1.0, 1.0);
    let b = u(&[3, 4], -1.0, 1.0);
    let lhs_rhs: &[&str] = &["lhs", "rhs"];
    let xwb: &[&str] = &["x", "w", "b"];
    let xgb: &[&str] = &["x", "gamma", "beta"];
    let eval_stats = RunningStats {
        mean: vec![0.1, -0.2, 0.05],
        var: vec![0.8, 1.3, 0.6],
        momentum: 0.1,
    };
    let (bn_x, bn_g, bn_b) = (u(&[2, 3, 4, 4], -1.0, 1.0), u(&[3], 0.5, 1.5), u(&[3], -0.5, 0.5));

    let mut cases: Vec<(&str, OpCase, Vec<Tensor>, &[&str])> = vec![
        ("add", OpCase::Add, vec![a.clone(), b.clone()], lhs_rhs),
        ("sub", OpCase::Sub, vec![a.clone(), b.clone()], lhs_rhs),
        ("mul", OpCase::Mul, vec![a.clone(), b], lhs_rhs),
        ("scale", OpCase::Scale(-1.7), vec![a.clone()], &[""]),
        ("matmul", OpCase::MatMul, vec![u(&[3, 4], -1.0, 1.0), u(&[4, 2], -1.0, 1.0)], lhs_rhs),
        ("bias_add", OpCase::BiasAdd, vec![u(&[2, 3, 2, 2], -1.0, 1.0), u(&[3], -1.0, 1.0)], &["x", "b"]),
        (
            "conv2d",
            OpCase::Conv2d { stride: 2, pad: 1 },
            vec![u(&[1, 2, 5, 5], -1.0, 1.0), u(&[3, 2, 3, 3], -1.0, 1.0), u(&[3], -1.0, 1.0)],
            xwb,
        ),
        (
            "conv_transpose2d",
            OpCase::ConvTranspose2d { stride: 2, pad: 1 },
            vec![u(&[2, 3, 3, 3], -1.0, 1.0), u(&[3, 2, 4, 4], -1.0, 1.0), u(&[2], -1.0, 1.0)],
            xwb,
        ),
        (
            "batch_norm2d.train",
            OpCase::BatchNorm { eps: 1e-5, stats: None },
            vec![bn_x.clone(), bn_g.clone(), bn_b.clone()],
            xgb,
        ),
        (
            "batch_norm2d.eval",
            OpCase::BatchNorm { eps: 1e-5, stats: Some(eval_stats) },
            vec![bn_x, bn_g, bn_b],
            xgb,
        ),
        ("concat", OpCase::Concat(1), vec![u(&[2, 3, 2], -1.0, 1.0), u(&[2, 1, 2], -1.0, 1.0)], &["first", "second"]),
    ];
    let pred = u(&[6], 0.1, 0.9);
    let target = Tensor::new(&[6], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).expect("valid");
    cases.push(("bce_loss", OpCase::Bce, vec![pred, target], &["pred", "target"]));
    cases.push(("reduce_mean", OpCase::Mean, vec![a.clone()], &[""]));
    cases.push(("reshape", OpCase::Reshape(vec![2, 6]), vec![a], &[""]));
    let ax = away_from_zero(&mut rng, &[4, 5], 1e-2);
    for (name, kind) in [
        ("leaky_relu", Activation::LeakyRelu(0.2)),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        cases.push((name, OpCase::Act(kind), vec![ax.clone()], &[""]));
    }

    let mut reports = Vec::new();
    for (name, case, inputs, args) in &cases {
        for (wrt, arg) in args.iter().enumerate() {
            let probe = OpProbe { case, inputs, wrt };
            let mut report = check_input(&probe, &inputs[wrt], eps)?;
            report.name = if arg.is_empty() {
                name.to_string()
            } else {
                format!("{name}.{arg}")
            };
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Architecture used by the composite check: a two-block ladder at 8×8 with
/// small widths, so every parameter can be probed quickly.
pub fn composite_arch() -> ArchConfig {
    ArchConfig {
        z_dim: 6,
        image_size: 8,
        widths: vec![6, 4],
        init_std: 0.3,
        ..ArchConfig::default()
    }
}

/// Records `BCE(D(G(z, y), y), target)` with batch statistics and frozen
/// running stats; returns both forwards and the loss.
fn composite_forward<T: Real>(
    tape: &mut Tape<T>,
    gen: &mut Generator,
    disc: &mut Discriminator,
    z: &Tensor,
    labels: &[GleasonLabel],
    target: &[f32],
) -> std::result::Result<(Forward, Forward, Var), NetError> {
    let pass = Pass {
        train: true,
        update_stats: false,
        param_grads: true,
    };
    let zv = tape.constant(z.shape(), z.data().to_vec())?;
    let gf = gen.forward(tape, zv, labels, pass)?;
    let df = disc.forward(tape, gf.out, labels, pass)?;
    let t = tape.constant(&[target.len(), 1], target.to_vec())?;
    let loss = tape.bce_loss(df.out, t)?;
    Ok((gf, df, loss))
}

/// Sets coordinate `c` of parameter `pi` of network `net` (0 = G, 1 = D) and
/// returns the previous value.
fn poke(gen: &mut Generator, disc: &mut Discriminator, net: usize, pi: usize, c: usize, v: f32) -> f32 {
    let p = if net == 0 {
        gen.params_mut().swap_remove(pi)
    } else {
        disc.params_mut().swap_remove(pi)
    };
    std::mem::replace(&mut p.data_mut()[c], v)
}

/// Finite-difference check of `BCE(D(G(z, y), y), t)` against every
/// generator and discriminator parameter tensor on a 2-sample batch.
///
/// Up to `per_layer` coordinates of each parameter tensor are probed (all of
/// them when the tensor is smaller).
pub fn composite_reports(
    seed: u64,
    eps: f32,
    per_layer: usize,
) -> std::result::Result<Vec<GradCheckReport>, NetError> {
    let arch = composite_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Generator::new(&arch, &mut rng)?;
    let mut disc = Discriminator::new(&arch, &mut rng)?;
    // non-trivial batch-norm affine parameters
    for p in gen.params_mut().into_iter().chain(disc.params_mut()) {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.3f32..0.3);
            }
        }
    }
    let z = uniform(&mut rng, &[2, arch.z_dim], -1.0, 1.0);
    let labels = [GleasonLabel::from_index(1)?, GleasonLabel::from_index(7)?];
    let target = [1.0f32, 0.0];

    let mut tape = Tape::new();
    let (gf, df, loss) = composite_forward(&mut tape, &mut gen, &mut disc, &z, &labels, &target)?;
    tape.backward(loss)?;
    let base_sig = tape.branch_signature();
    let grads: Vec<Vec<Vec<f32>>> = [&gf.params, &df.params]
        .iter()
        .map(|ps| ps.iter().map(|&v| tape.grad(v).expect("param grad").to_vec()).collect())
        .collect();
    let names: Vec<Vec<String>> = vec![
        gen.named_params().into_iter().map(|(n, _)| format!("G.{n}")).collect(),
        disc.named_params().into_iter().map(|(n, _)| format!("D.{n}")).collect(),
    ];

    let mut reports = Vec::new();
    for net in 0..2 {
        for (pi, name) in names[net].iter().enumerate() {
            let numel = grads[net][pi].len();
            let coords: Vec<usize> = if numel <= per_layer {
                (0..numel).collect()
            } else {
                rand::seq::index::sample(&mut rng, numel, per_layer).into_vec()
            };
            let mut report = GradCheckReport::new(name.clone());
            for &c in &coords {
                let mut probe = |delta: f32| -> std::result::Result<(f64, Vec<bool>, f32), NetError> {
                    let orig = poke(&mut gen, &mut disc, net, pi, c, 0.0);
                    let moved = orig + delta;
                    poke(&mut gen, &mut disc, net, pi, c, moved);
                    let mut t64 = Tape::<f64>::default();
                    let out = composite_forward(&mut t64, &mut gen, &mut disc, &z, &labels, &target);
                    poke(&mut gen, &mut disc, net, pi, c, orig);
                    let (_, _, loss) = out?;
                    Ok((t64.value(loss)[0], t64.branch_signature(), moved))
                };
                let (lp, sp, hi) = probe(eps)?;
                let (lm, sm, lo) = probe(-eps)?;
                if sp != base_sig || sm != base_sig {
                    report.skipped += 1;
                    continue;
                }
                report.record(grads[net][pi][c] as f64, (lp - lm) / (hi as f64 - lo as f64));
            }
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Every op check plus the composite check for one seed.
pub fn suite(seed: u64) -> std::result::Result<Vec<GradCheckReport>, NetError> {
    let mut reports = op_reports(seed, 1e-3)?;
    reports.extend(composite_reports(seed, 1e-3, 20)?);
    Ok(reports)
}
