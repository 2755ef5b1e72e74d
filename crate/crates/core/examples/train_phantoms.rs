//! Trains the conditional GAN on synthetic phantoms and reports the artifact
//! metrics of every snapshot.
//!
//! ```text
//! cargo run --release --example train_phantoms -- [seed] [epochs] [per_class] [out_dir]
//! ```
//!
//! Defaults: seed 0, 30 epochs, 128 phantoms per class, `runs/phantoms`.

use std::path::PathBuf;

use condgan::eval::{evaluate_checkpoints, CentroidModel};
use condgan::phantom::phantom_records;
use condgan::train::{list_checkpoints, train, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = arg(1, 0);
    let epochs: u32 = arg(2, 30);
    let per_class: usize = arg(3, 128);
    let out: PathBuf = arg(4, PathBuf::from("runs/phantoms"));

    let data = phantom_records(per_class, seed);
    let config = TrainConfig {
        epochs,
        master_seed: seed,
        out_dir: out.clone(),
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let (mut d_sum, mut g_sum, mut n) = (0.0, 0.0, 0);
    let summary = train(&config, &data, &mut |row| {
        d_sum += row.d_loss;
        g_sum += row.g_loss;
        n += 1;
        if row.batch + 1 == data.len().div_ceil(config.batch_size) {
            println!(
                "epoch {:3}  mean d_loss {:.3}  mean g_loss {:.3}  ({:.0}s)",
                row.epoch,
                d_sum / n as f32,
                g_sum / n as f32,
                started.elapsed().as_secs_f32()
            );
            (d_sum, g_sum, n) = (0.0, 0.0, 0);
        }
    })?;
    println!("snapshots {:?} in {}", summary.snapshots, out.display());

    let model = CentroidModel::fit(&data)?;
    let held_out = phantom_records(64, seed + 1_000);
    println!("centroid held-out accuracy {:.3}", model.record_accuracy(&held_out));

    let paths: Vec<_> = list_checkpoints(&out)?.into_iter().map(|(_, p)| p).collect();
    let report = evaluate_checkpoints(&paths, &model, 256, seed)?;
    print!("{}", report.to_csv());
    Ok(())
}
