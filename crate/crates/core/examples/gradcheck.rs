//! Finite-difference check of every tape op and of the full
//! discriminator(generator(z, y), y) composite, over five seeds.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use condgan::gradcheck::suite;

const TOL: f64 = 1e-2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        println!("seed {seed}");
        for r in suite(seed)? {
            worst = worst.max(r.max_rel_err);
            let verdict = if r.passes(TOL) { "ok" } else { "FAIL" };
            println!(
                "  {:<36} {:>10.2e}  checked {:>4}  skipped {:>3}  {verdict}",
                r.name, r.max_rel_err, r.checked, r.skipped
            );
        }
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
