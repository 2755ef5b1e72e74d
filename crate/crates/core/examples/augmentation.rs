//! The eight square symmetries applied to one phantom, and the seeded
//! augmentation used during batching.
//!
//! ```text
//! cargo run --release --example augmentation -- [out_dir]
//! ```

use std::path::PathBuf;

use condgan::data::{augment, grid_to_pgm, Dihedral, EpochPlan};
use condgan::phantom::{generate_phantom, phantom_records};
use condgan::GleasonLabel;
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or("runs/augmentation".into());
    std::fs::create_dir_all(&out)?;

    let record = generate_phantom(GleasonLabel::from_score(9)?, 3);
    for (code, d) in Dihedral::all().enumerate() {
        let img = d.apply(&record.pixels);
        assert_eq!(d.inverse().apply(&img), record.pixels);
        let path = out.join(format!("dihedral_{code}.pgm"));
        grid_to_pgm(&img).write(&path)?;
        println!("{d:?} -> {}", path.display());
    }
    let flip = record.pixels.hflip();
    assert_eq!(flip.hflip(), record.pixels);
    println!("every symmetry is undone by its inverse; a flip is its own inverse");

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for _ in 0..4 {
        let aug = augment(&record, &mut rng);
        let d = Dihedral::all().find(|d| d.apply(&record.pixels) == aug.pixels).expect("a symmetry");
        println!("augment drew {d:?}");
    }

    // batches are a pure function of (records, epoch, seed)
    let records = phantom_records(4, 0);
    let plan = EpochPlan::new(records.len(), 16, 1, 0);
    let a = plan.batch(&records, 0);
    let b = EpochPlan::new(records.len(), 16, 1, 0).batch(&records, 0);
    assert_eq!(a.images.data(), b.images.data());
    println!("{} batches of up to 16 per epoch, reproducible from the seed", plan.num_batches());
    Ok(())
}
