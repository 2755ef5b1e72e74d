//! Interrupts a short run after one epoch, resumes it from the checkpoint and
//! confirms the result matches an uninterrupted run.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use condgan::phantom::phantom_records;
use condgan::train::{checkpoint_path, run, train, TrainConfig, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("condgan_resume_example");
    let _ = std::fs::remove_dir_all(&dir);
    let data = phantom_records(8, 5);
    let base = TrainConfig {
        epochs: 2,
        batch_size: 16,
        master_seed: 5,
        snapshot_epochs: Some(vec![1, 2]),
        ..TrainConfig::default()
    };

    let whole = TrainConfig { out_dir: dir.join("whole"), ..base.clone() };
    train(&whole, &data, &mut |_| {})?;

    let part = TrainConfig {
        epochs: 1,
        snapshot_epochs: Some(vec![1]),
        out_dir: dir.join("part"),
        ..base.clone()
    };
    train(&part, &data, &mut |_| {})?;
    let mut state = TrainState::load(checkpoint_path(&part.out_dir, 1))?;
    state.config.epochs = 2;
    state.config.snapshot_epochs = Some(vec![1, 2]);
    run(state, &data, &mut |row| println!("resumed {}", row.progress()))?;

    for f in ["losses.csv", "grid.pgm", "grid_e002.pgm"] {
        let same = std::fs::read(whole.out_dir.join(f))? == std::fs::read(part.out_dir.join(f))?;
        println!("{f}: {}", if same { "identical" } else { "DIFFERS" });
    }
    Ok(())
}
