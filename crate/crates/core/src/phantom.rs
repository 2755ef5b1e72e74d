//! Seeded class-conditional synthetic gland images.
//!
//! Each phantom is a bright ellipse on a dark, noisy background. Glands shrink
//! and dim gradually with the class index, and from score 6 upward
//! `score − 5` dark lesion discs are punched into the gland interior.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{grid_to_pgm, Grid, ImageRecord, PgmError, CANVAS};
use crate::nets::{GleasonLabel, N_CLASSES};
use crate::rng;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("per_class must be at least 1")]
    EmptyClass,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Pgm { path: PathBuf, source: PgmError },
}

/// Geometry and intensity ranges of the phantom family.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    /// Uniform jitter of the gland center around the canvas center, in px.
    pub center_jitter: f32,
    /// Mean semi-axis for class index 0; each class index step subtracts
    /// `semi_axis_step`.
    pub semi_axis_max: f32,
    pub semi_axis_step: f32,
    pub semi_axis_jitter: f32,
    /// Gland intensity for class index 0 and for the last class.
    pub base_max: f32,
    pub base_min: f32,
    pub base_jitter: f32,
    pub background: f32,
    pub noise_std: f32,
    pub lesion_radius: (f32, f32),
    pub lesion_depth: f32,
    pub lesion_depth_step: f32,
    /// Lesion centers stay inside this normalized squared ellipse radius.
    pub lesion_reach: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: CANVAS,
            center_jitter: 2.0,
            semi_axis_max: 14.0,
            semi_axis_step: 0.75,
            semi_axis_jitter: 0.25,
            base_max: 0.6,
            base_min: 0.3,
            base_jitter: 0.02,
            background: -0.9,
            noise_std: 0.05,
            lesion_radius: (2.0, 4.0),
            lesion_depth: 0.4,
            lesion_depth_step: 0.05,
            lesion_reach: 0.5,
        }
    }
}

/// Number of lesions drawn for a label.
pub fn lesion_count(label: GleasonLabel) -> usize {
    (label.score() as usize).saturating_sub(5)
}

/// A rendered phantom with its construction masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub record: ImageRecord,
    pub gland: Vec<bool>,
    /// Depression applied at each pixel (0 outside lesions).
    pub depression: Vec<f32>,
    pub base: f32,
}

impl PhantomSpec {
    pub fn render(&self, label: GleasonLabel, seed: u64) -> Phantom {
        let mut r = rng::stream(seed, &[rng::TAG_PHANTOM, label.score() as u64]);
        let n = self.size;
        let k = label.index() as f32;
        let mid = n as f32 / 2.0;
        let cx = mid + r.gen_range(-self.center_jitter..=self.center_jitter);
        let cy = mid + r.gen_range(-self.center_jitter..=self.center_jitter);
        let axis = self.semi_axis_max - self.semi_axis_step * k;
        let a = axis + r.gen_range(-self.semi_axis_jitter..=self.semi_axis_jitter);
        let b = axis + r.gen_range(-self.semi_axis_jitter..=self.semi_axis_jitter);
        let t = k / (N_CLASSES - 1) as f32;
        let base = self.base_max - (self.base_max - self.base_min) * t
            + r.gen_range(-self.base_jitter..=self.base_jitter);

        let ellipse = |x: f32, y: f32| ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2);
        let noise = Normal::new(0.0, self.noise_std).expect("finite std");
        let mut gland = vec![false; n * n];
        let mut pixels = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                // the noise draw happens for every pixel so the stream layout is
                // independent of the gland shape
                let bg = self.background + noise.sample(&mut r);
                gland[i] = ellipse(x as f32 + 0.5, y as f32 + 0.5) <= 1.0;
                pixels[i] = if gland[i] { base } else { bg };
            }
        }

        let mut depression = vec![0.0f32; n * n];
        let depth = self.lesion_depth + self.lesion_depth_step * (label.score() as f32 - 6.0);
        for _ in 0..lesion_count(label) {
            let radius = r.gen_range(self.lesion_radius.0..=self.lesion_radius.1);
            let (px, py) = loop {
                let p = (cx + r.gen_range(-a..=a), cy + r.gen_range(-b..=b));
                if ellipse(p.0, p.1) <= self.lesion_reach {
                    break p;
                }
            };
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f32 + 0.5 - px, y as f32 + 0.5 - py);
                    let i = y * n + x;
                    if gland[i] && dx * dx + dy * dy <= radius * radius {
                        depression[i] = depression[i].max(depth);
                    }
                }
            }
        }
        for (p, d) in pixels.iter_mut().zip(&depression) {
            *p = (*p - d).clamp(-1.0, 1.0);
        }

        Phantom {
            record: ImageRecord {
                pixels: Grid::new(n, n, pixels),
                label,
                source_id: format!("phantom:s{}:{seed}", label.score()),
            },
            gland,
            depression,
            base,
        }
    }
}

/// Renders one phantom with the default spec.
pub fn generate_phantom(label: GleasonLabel, seed: u64) -> ImageRecord {
    PhantomSpec::default().render(label, seed).record
}

/// Seed of the `index`-th phantom of a class within a dataset.
pub fn dataset_seed(master_seed: u64, label: GleasonLabel, index: usize) -> u64 {
    rng::derive_seed(master_seed, &[rng::TAG_PHANTOM, label.index() as u64, index as u64])
}

/// In-memory phantom set, class-major.
pub fn phantom_records(per_class: usize, master_seed: u64) -> Vec<ImageRecord> {
    GleasonLabel::all()
        .flat_map(|label| {
            (0..per_class).map(move |i| generate_phantom(label, dataset_seed(master_seed, label, i)))
        })
        .collect()
}

pub fn file_name(label: GleasonLabel, index: usize) -> String {
    format!("s{}_{index:04}.pgm", label.score())
}

/// Writes `9·per_class` PGM files and `manifest.tsv` to `out_dir`; returns the
/// manifest path.
pub fn generate_dataset(
    per_class: usize,
    master_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf, PhantomError> {
    if per_class == 0 {
        return Err(PhantomError::EmptyClass);
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| PhantomError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut manifest = String::from("# path\tscore\n");
    for label in GleasonLabel::all() {
        for i in 0..per_class {
            let rec = generate_phantom(label, dataset_seed(master_seed, label, i));
            let name = file_name(label, i);
            let path = out_dir.join(&name);
            grid_to_pgm(&rec.pixels)
                .write(&path)
                .map_err(|source| PhantomError::Pgm { path, source })?;
            writeln!(manifest, "{name}\t{}", label.score()).expect("string write");
        }
    }
    let path = out_dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|source| PhantomError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
