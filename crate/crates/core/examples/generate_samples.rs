//! Loads a checkpoint and writes generated images for every score.
//!
//! ```text
//! cargo run --release --example generate_samples -- <checkpoint> [n_per_score] [seed] [out_dir]
//! ```

use std::path::PathBuf;

use condgan::data::grid_to_pgm;
use condgan::eval::{crop_mean, sample_images};
use condgan::train::TrainState;
use condgan::{rng, GleasonLabel};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Some(ckpt) = std::env::args().nth(1) else {
        eprintln!("usage: generate_samples <checkpoint> [n_per_score] [seed] [out_dir]");
        std::process::exit(1);
    };
    let n: usize = arg(2, 8);
    let seed: u64 = arg(3, 0);
    let out: PathBuf = arg(4, PathBuf::from("runs/samples"));
    std::fs::create_dir_all(&out)?;

    let state = TrainState::load(&ckpt)?;
    println!("checkpoint from epoch {}", state.epoch);
    let mut r = rng::stream(seed, &[rng::TAG_SAMPLES]);
    for label in GleasonLabel::all() {
        let images = sample_images(&state.gen, &vec![label; n], &mut r)?;
        for (i, img) in images.iter().enumerate() {
            grid_to_pgm(img).write(out.join(format!("gen_s{}_{i:04}.pgm", label.score())))?;
        }
        let dark = images.iter().map(crop_mean).sum::<f32>() / n as f32;
        println!("score {}: {n} images, mean centre intensity {dark:.3}", label.score());
    }
    Ok(())
}
