//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! The three 30-epoch desk runs dominate the runtime (about four minutes each
//! on one core in release mode); criteria 5 to 7 share them.

use std::path::Path;
use std::time::Instant;

use condgan::data::{normalize_image, quantize, Dihedral, EpochPlan, Grid};
use condgan::eval::{evaluate_checkpoints, median, ArtifactReport, CentroidModel};
use condgan::gradcheck::suite;
use condgan::nets::{ArchConfig, Network, Pass};
use condgan::phantom::phantom_records;
use condgan::rng;
use condgan::train::{
    checkpoint_path, grid_path, read_losses, train, Checkpoint, LossRow, TrainConfig,
    TrainState,
};
use condgan::{Discriminator, Generator, GleasonLabel, Tape};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_EPOCHS: u32 = 30;
const DESK_PER_CLASS: usize = 128;
const SAMPLES_PER_CLASS: usize = 256;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failing = Vec::new();
    let mut count = 0;
    for seed in 0..5 {
        for r in suite(seed).map_err(fail)? {
            count += 1;
            worst = worst.max(r.max_rel_err);
            if !r.passes(1e-2) {
                failing.push(format!("{} (seed {seed}, {:.2e})", r.name, r.max_rel_err));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failing.is_empty() && secs < 120.0,
        format!("{count} checks over 5 seeds, worst rel err {worst:.2e}, {secs:.1}s, failing {failing:?}"),
    )
}

fn spatial_chain(tape: &Tape, params: &[Vec<usize>]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for s in tape.shapes().filter(|s| s.len() == 4 && !params.iter().any(|p| p == s)) {
        if out.last() != Some(&s[2]) {
            out.push(s[2]);
        }
    }
    out
}

fn param_shapes(net: &impl Network) -> Vec<Vec<usize>> {
    net.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect()
}

fn shapes() -> Outcome {
    let arch = ArchConfig::default();
    let mut gen = Generator::new(&arch, &mut rng::stream(1, &[rng::TAG_GENERATOR_INIT])).map_err(fail)?;
    let mut disc = Discriminator::new(&arch, &mut rng::stream(1, &[rng::TAG_DISCRIMINATOR_INIT])).map_err(fail)?;
    let n = 4;
    let labels: Vec<GleasonLabel> = (0..n).map(|i| GleasonLabel::from_index(i * 2).unwrap()).collect();

    let mut tape = Tape::new();
    let z = condgan::train::sample_noise(n, arch.z_dim, &mut rng::stream(1, &[9]));
    let zv = tape.leaf(&z);
    let g = gen.forward(&mut tape, zv, &labels, Pass::FROZEN).map_err(fail)?;
    let g_chain = spatial_chain(&tape, &param_shapes(&gen));
    let img = tape.to_tensor(g.out);
    let g_range = img.data().iter().all(|v| (-1.0..=1.0).contains(v));

    let mut tape = Tape::new();
    let xv = tape.leaf(&img);
    let d = disc.forward(&mut tape, xv, &labels, Pass::FROZEN).map_err(fail)?;
    let d_chain = spatial_chain(&tape, &param_shapes(&disc));
    let p = tape.to_tensor(d.out);
    let d_range = p.data().iter().all(|&v| v > 0.0 && v < 1.0);

    check(
        g_chain == [4, 8, 16, 32] && img.shape() == [n, 1, 32, 32] && g_range
            && d_chain == [32, 16, 8, 4] && p.shape() == [n, 1] && d_range,
        format!(
            "G {g_chain:?} -> {:?} in [-1,1]: {g_range}; D {d_chain:?} -> {:?} in (0,1): {d_range}",
            img.shape(),
            p.shape()
        ),
    )
}

fn init_statistics() -> Outcome {
    let arch = ArchConfig::default();
    let gen = Generator::new(&arch, &mut rng::stream(0, &[rng::TAG_GENERATOR_INIT])).map_err(fail)?;
    let weights: Vec<f64> = gen
        .named_params()
        .iter()
        .filter(|(name, _)| name.ends_with(".w"))
        .flat_map(|(_, t)| t.data().iter().map(|&v| v as f64))
        .collect();
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let std = (weights.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    check(
        weights.len() >= 1_000_000 && mean.abs() < 5e-4 && (std - 0.02).abs() < 5e-4,
        format!("{} generator weights: mean {mean:.2e}, std {std:.5}", weights.len()),
    )
}

fn hyperparameters() -> Outcome {
    let echo = TrainConfig::default().echo();
    let want = ["lr = 0.0002", "beta1 = 0.5", "batch_size = 64", "z_dim = 100", "leaky_slope = 0.2", "epochs = 100"];
    let missing: Vec<&str> = want.iter().copied().filter(|w| !echo.lines().any(|l| l == *w)).collect();
    check(missing.is_empty(), format!("default echo missing {missing:?}"))
}

struct DeskRun {
    seed: u64,
    losses: Vec<LossRow>,
    report: ArtifactReport,
    held_out: f32,
}

fn desk_run(seed: u64, root: &Path) -> Result<DeskRun, String> {
    let data = phantom_records(DESK_PER_CLASS, seed);
    let config = TrainConfig {
        epochs: DESK_EPOCHS,
        master_seed: seed,
        out_dir: root.join(format!("seed{seed}")),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let summary = train(&config, &data, &mut |_| {}).map_err(fail)?;
    eprintln!("  desk run seed {seed}: {} epochs in {:.0}s", DESK_EPOCHS, start.elapsed().as_secs_f64());

    let model = CentroidModel::fit(&data).map_err(fail)?;
    let held_out = model.record_accuracy(&phantom_records(DESK_PER_CLASS, 1_000 + seed));
    let paths = vec![checkpoint_path(&config.out_dir, 1), checkpoint_path(&config.out_dir, DESK_EPOCHS)];
    let report = evaluate_checkpoints(&paths, &model, SAMPLES_PER_CLASS, seed).map_err(fail)?;
    Ok(DeskRun { seed, losses: summary.losses, report, held_out })
}

fn loss_bands(run: &DeskRun) -> Outcome {
    let finite = run.losses.iter().all(|r| r.d_loss.is_finite() && r.g_loss.is_finite());
    let tail: Vec<&LossRow> = run.losses.iter().filter(|r| r.epoch > DESK_EPOCHS - 3).collect();
    let d = median(&tail.iter().map(|r| r.d_loss).collect::<Vec<_>>());
    let g = median(&tail.iter().map(|r| r.g_loss).collect::<Vec<_>>());
    check(
        finite && (0.3..=2.5).contains(&d) && (0.3..=3.5).contains(&g),
        format!(
            "seed {}: {} rows, all finite {finite}; last-3-epoch median d_loss {d:.3}, g_loss {g:.3}",
            run.seed,
            run.losses.len()
        ),
    )
}

fn artifact_fading(runs: &[DeskRun]) -> Outcome {
    let per_seed: Vec<(u64, f32, f32)> = runs
        .iter()
        .map(|r| (r.seed, r.report.rows[0].cb_energy, r.report.rows[1].cb_energy))
        .collect();
    let passing = per_seed.iter().filter(|(_, first, last)| last < first).count();
    let detail = per_seed
        .iter()
        .map(|(s, a, b)| format!("seed {s}: e1 {a:.4} -> e{DESK_EPOCHS} {b:.4}"))
        .collect::<Vec<_>>()
        .join("; ");
    check(passing >= 2, format!("{passing}/3 seeds fade ({detail})"))
}

fn conditional_fidelity(runs: &[DeskRun]) -> Outcome {
    let nine = GleasonLabel::from_score(9).unwrap();
    let zero = GleasonLabel::from_score(0).unwrap();
    let mut passing = 0;
    let mut parts = Vec::new();
    for r in runs {
        let last = &r.report.rows[1];
        let (d9, d0) = (last.darkness.get(nine).unwrap(), last.darkness.get(zero).unwrap());
        let ok = r.held_out >= 0.80 && last.acc >= 0.33 && d9 < d0;
        passing += ok as usize;
        parts.push(format!(
            "seed {}: model held-out {:.3}, generated acc {:.3}, darkness 9 {d9:.3} vs 0 {d0:.3}",
            r.seed, r.held_out, last.acc
        ));
    }
    let models_ok = runs.iter().all(|r| r.held_out >= 0.80);
    check(models_ok && passing >= 2, format!("{passing}/3 seeds ({})", parts.join("; ")))
}

fn determinism(root: &Path) -> Outcome {
    let data = phantom_records(4, 21);
    let config = |name: &str| TrainConfig {
        epochs: 2,
        batch_size: 16,
        master_seed: 21,
        snapshot_epochs: Some(vec![1, 2]),
        out_dir: root.join(name),
        ..TrainConfig::default()
    };
    let a = config("a");
    let b = config("b");
    train(&a, &data, &mut |_| {}).map_err(fail)?;
    train(&b, &data, &mut |_| {}).map_err(fail)?;
    let mut same_files = true;
    for f in ["losses.csv", "grid.pgm"] {
        same_files &= std::fs::read(a.out_dir.join(f)).map_err(fail)? == std::fs::read(b.out_dir.join(f)).map_err(fail)?;
    }
    for e in [1, 2] {
        same_files &= std::fs::read(grid_path(&a.out_dir, e)).map_err(fail)?
            == std::fs::read(grid_path(&b.out_dir, e)).map_err(fail)?;
    }
    let logged = read_losses(a.out_dir.join("losses.csv")).map_err(fail)?.len();
    let expected_rows = a.epochs as usize * data.len().div_ceil(a.batch_size);

    let path = checkpoint_path(&a.out_dir, 2);
    let bytes = std::fs::read(&path).map_err(fail)?;
    let state = TrainState::load(&path).map_err(fail)?;
    let resaved = state.to_checkpoint().encode();
    let decoded = Checkpoint::decode(&bytes).map_err(fail)?;
    let original = TrainState::from_checkpoint(&decoded).map_err(fail)?;
    let before = original.grid.column(&original.gen).map_err(fail)?;
    let after = state.grid.column(&state.gen).map_err(fail)?;
    let bitwise = before.iter().zip(&after).all(|(x, y)| bit_equal(x, y));

    check(
        same_files && logged == expected_rows && resaved == bytes && bitwise,
        format!(
            "repeat runs identical {same_files} ({logged}/{expected_rows} loss rows); checkpoint re-save identical {}; post-load generation bitwise {bitwise}",
            resaved == bytes
        ),
    )
}

fn bit_equal(a: &Grid, b: &Grid) -> bool {
    a.pixels.len() == b.pixels.len() && a.pixels.iter().zip(&b.pixels).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn data_pipeline() -> Outcome {
    let img = Grid::new(5, 7, (0..35).map(|i| i as f32 * 0.37 - 3.0).collect());
    let mut involutions = img.hflip().hflip() == img && img.rot90().rot90().rot90().rot90() == img;
    for d in Dihedral::all() {
        involutions &= d.inverse().apply(&d.apply(&img)) == img;
    }
    let ends = normalize_image(&[0, 255]);
    let endpoints = ends == [-1.0, 1.0] && quantize(-1.0) == 0 && quantize(1.0) == 255;

    let records = phantom_records(15, 3);
    let records = &records[..130];
    let plan = EpochPlan::new(records.len(), 64, 1, 3);
    let sizes: Vec<usize> = (0..plan.num_batches()).map(|i| plan.batch(records, i).labels.len()).collect();
    check(
        involutions && endpoints && sizes == [64, 64, 2],
        format!("involutions exact {involutions}; endpoints exact {endpoints}; 130 records -> {sizes:?}"),
    )
}

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
        Err(detail) => println!("criterion {n} FAIL  {name}: {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut results = Vec::new();
    results.push(report(1, "gradient suite", &gradient_suite()));
    results.push(report(2, "shapes", &shapes()));
    results.push(report(3, "initialization", &init_statistics()));
    results.push(report(4, "hyperparameters", &hyperparameters()));

    let runs: Result<Vec<DeskRun>, String> = DESK_SEEDS.iter().map(|&s| desk_run(s, root.path())).collect();
    match runs {
        Ok(runs) => {
            results.push(report(5, "desk-scale losses", &loss_bands(&runs[0])));
            for r in &runs[1..] {
                println!("            other seed: {}", loss_bands(r).unwrap_or_else(|e| e));
            }
            results.push(report(6, "artifact fading", &artifact_fading(&runs)));
            results.push(report(7, "conditional fidelity", &conditional_fidelity(&runs)));
        }
        Err(e) => {
            for (n, name) in [(5, "desk-scale losses"), (6, "artifact fading"), (7, "conditional fidelity")] {
                results.push(report(n, name, &Err(format!("training failed: {e}"))));
            }
        }
    }
    results.push(report(8, "determinism and persistence", &determinism(root.path())));
    results.push(report(9, "data pipeline", &data_pipeline()));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
