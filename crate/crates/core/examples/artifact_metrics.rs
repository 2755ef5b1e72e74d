//! Checkerboard energy, conditional accuracy and class darkness for every
//! snapshot of a finished run.
//!
//! ```text
//! cargo run --release --example artifact_metrics -- <run_dir> [n_per_class] [seed]
//! ```

use std::path::PathBuf;

use condgan::eval::{checkerboard_energy, evaluate_checkpoints, CentroidModel};
use condgan::phantom::phantom_records;
use condgan::train::list_checkpoints;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Some(dir) = std::env::args().nth(1).map(PathBuf::from) else {
        eprintln!("usage: artifact_metrics <run_dir> [n_per_class] [seed]");
        std::process::exit(1);
    };
    let n: usize = arg(2, 256);
    let seed: u64 = arg(3, 0);

    let fit = phantom_records(64, seed);
    let model = CentroidModel::fit(&fit)?;
    let check = model.record_accuracy(&phantom_records(64, seed + 1));
    println!("centroid model held-out accuracy {check:.3}");

    let paths: Vec<_> = list_checkpoints(&dir)?.into_iter().map(|(_, p)| p).collect();
    let report = evaluate_checkpoints(&paths, &model, n, seed)?;
    print!("{}", report.to_csv());

    let flat = condgan::data::Grid::new(4, 4, vec![0.5; 16]);
    let stripes = condgan::data::Grid::new(4, 4, (0..16).map(|i| if (i + i / 4) % 2 == 0 { 1.0 } else { -1.0 }).collect());
    println!(
        "reference energies: flat {:.3}, pixel checkerboard {:.3}",
        checkerboard_energy(&flat),
        checkerboard_energy(&stripes)
    );
    Ok(())
}
