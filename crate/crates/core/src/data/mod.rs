//! Dataset ingestion and deterministic batching.
//!
//! Manifests are UTF-8 text with one `path<TAB>score` record per line (paths
//! relative to the manifest, `#` lines ignored). Images are 8-bit PGM; pixels
//! are mapped to `[-1, 1]` by `x/127.5 − 1`, placed on a 32×32 canvas and
//! augmented with a random square symmetry per sample and epoch.

pub mod augment;
pub mod pgm;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

pub use augment::{Dihedral, Grid};
pub use pgm::{GrayImage, PgmError};

use crate::nets::{GleasonLabel, LabelError};
use crate::rng;
use crate::tensor::Tensor;

/// Side length of every image fed to the networks.
pub const CANVAS: usize = 32;
/// Accepted side lengths for ingested images.
pub const MIN_SIDE: usize = 10;
pub const MAX_SIDE: usize = 64;
/// Canvas background after normalization.
pub const BACKGROUND: f32 = -1.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Label { line: usize, source: LabelError },
    #[error("{path}: {source}")]
    Pgm { path: PathBuf, source: PgmError },
    #[error("{path}: image is {height}×{width}, sides must be within {MIN_SIDE}..={MAX_SIDE}")]
    ImageSize {
        path: PathBuf,
        height: usize,
        width: usize,
    },
}

/// A normalized grayscale image with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub pixels: Grid,
    pub label: GleasonLabel,
    pub source_id: String,
}

/// `x/127.5 − 1`: 0 → −1, 255 → +1.
pub fn normalize_image(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&v| v as f32 / 127.5 - 1.0).collect()
}

/// Inverse of [`normalize_image`]: `round((x + 1)·127.5)`, saturating.
pub fn quantize(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn grid_from_pgm(img: &GrayImage) -> Grid {
    Grid::new(img.height, img.width, normalize_image(&img.pixels))
}

pub fn grid_to_pgm(grid: &Grid) -> GrayImage {
    GrayImage::new(
        grid.width,
        grid.height,
        grid.pixels.iter().map(|&v| quantize(v)).collect(),
    )
}

fn bilinear(src: &Grid, nh: usize, nw: usize) -> Grid {
    let (sy, sx) = (src.height as f32 / nh as f32, src.width as f32 / nw as f32);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (src.height - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.height - 1);
        let ty = fy - y0 as f32;
        for x in 0..nw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (src.width - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.width - 1);
            let tx = fx - x0 as f32;
            let top = src.get(y0, x0) * (1.0 - tx) + src.get(y0, x1) * tx;
            let bottom = src.get(y1, x0) * (1.0 - tx) + src.get(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Grid::new(nh, nw, out)
}

/// Resizes so the longer side is [`CANVAS`] (aspect preserved, bilinear) and
/// centers the result on a [`BACKGROUND`]-filled square canvas.
pub fn fit_to_canvas(grid: &Grid) -> Grid {
    let long = grid.height.max(grid.width) as f64;
    let scale = CANVAS as f64 / long;
    let nh = ((grid.height as f64 * scale).round() as usize).clamp(1, CANVAS);
    let nw = ((grid.width as f64 * scale).round() as usize).clamp(1, CANVAS);
    let resized = if (nh, nw) == (grid.height, grid.width) {
        grid.clone()
    } else {
        bilinear(grid, nh, nw)
    };
    let (top, left) = ((CANVAS - nh) / 2, (CANVAS - nw) / 2);
    let mut canvas = vec![BACKGROUND; CANVAS * CANVAS];
    for (r, row) in resized.pixels.chunks(nw).enumerate() {
        canvas[(top + r) * CANVAS + left..][..nw].copy_from_slice(row);
    }
    Grid::new(CANVAS, CANVAS, canvas)
}

/// Applies one uniformly drawn square symmetry.
pub fn augment<R: rand::Rng + ?Sized>(record: &ImageRecord, rng: &mut R) -> ImageRecord {
    let d = Dihedral::sample(rng);
    ImageRecord {
        pixels: d.apply(&record.pixels),
        ..record.clone()
    }
}

fn split_record(line: &str) -> Option<(&str, &str)> {
    line.rsplit_once('\t')
        .or_else(|| line.rsplit_once(char::is_whitespace))
        .map(|(p, s)| (p.trim(), s.trim()))
}

/// Reads a manifest and every image it lists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (rel, score) = split_record(line).ok_or_else(|| DataError::Malformed {
            line: line_no,
            msg: format!("expected `path<TAB>score`, got {line:?}"),
        })?;
        if rel.is_empty() {
            return Err(DataError::Malformed {
                line: line_no,
                msg: "empty image path".into(),
            });
        }
        let score: i64 = score.parse().map_err(|_| DataError::Malformed {
            line: line_no,
            msg: format!("score {score:?} is not an integer"),
        })?;
        let label = GleasonLabel::from_score(score).map_err(|source| DataError::Label {
            line: line_no,
            source,
        })?;
        let img_path = base.join(rel);
        let img = GrayImage::read(&img_path).map_err(|source| DataError::Pgm {
            path: img_path.clone(),
            source,
        })?;
        let sides = MIN_SIDE..=MAX_SIDE;
        if !sides.contains(&img.height) || !sides.contains(&img.width) {
            return Err(DataError::ImageSize {
                path: img_path,
                height: img.height,
                width: img.width,
            });
        }
        records.push(ImageRecord {
            pixels: grid_from_pgm(&img),
            label,
            source_id: rel.to_string(),
        });
    }
    Ok(records)
}

/// One training batch with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, 1, 32, 32]`
    pub images: Tensor,
    pub labels: Vec<GleasonLabel>,
    pub epoch: u32,
    pub batch_index: usize,
    /// Seed of the epoch's shuffle stream.
    pub rng_stream_id: u64,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

/// The shuffled order of one epoch. Every batch is a pure function of
/// `(records, epoch, master_seed, batch_index)`, so batches can be built in
/// any order or on any number of workers.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    order: Vec<usize>,
    batch_size: usize,
    epoch: u32,
    master_seed: u64,
}

impl EpochPlan {
    pub fn new(len: usize, batch_size: usize, epoch: u32, master_seed: u64) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng::stream(master_seed, &[rng::TAG_SHUFFLE, epoch as u64]));
        Self {
            order,
            batch_size,
            epoch,
            master_seed,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn batch(&self, records: &[ImageRecord], batch_index: usize) -> Batch {
        let start = batch_index * self.batch_size;
        let indices = self.order[start..(start + self.batch_size).min(self.order.len())].to_vec();
        let mut images = Vec::with_capacity(indices.len() * CANVAS * CANVAS);
        let mut labels = Vec::with_capacity(indices.len());
        for &ri in &indices {
            let mut aug_rng = rng::stream(
                self.master_seed,
                &[rng::TAG_AUGMENT, self.epoch as u64, ri as u64],
            );
            let rec = augment(&records[ri], &mut aug_rng);
            images.extend_from_slice(&fit_to_canvas(&rec.pixels).pixels);
            labels.push(rec.label);
        }
        let n = indices.len();
        Batch {
            images: Tensor::new(&[n, 1, CANVAS, CANVAS], images).expect("batch is nonempty"),
            labels,
            epoch: self.epoch,
            batch_index,
            rng_stream_id: rng::derive_seed(self.master_seed, &[rng::TAG_SHUFFLE, self.epoch as u64]),
            indices,
        }
    }
}

/// All batches of one epoch in order; the final short batch is kept.
pub fn batch_iter(
    records: &[ImageRecord],
    batch_size: usize,
    epoch: u32,
    master_seed: u64,
) -> impl Iterator<Item = Batch> + '_ {
    let plan = EpochPlan::new(records.len(), batch_size, epoch, master_seed);
    (0..plan.num_batches()).map(move |b| plan.batch(records, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(h: usize, w: usize, label: usize) -> ImageRecord {
        ImageRecord {
            pixels: Grid::new(h, w, (0..h * w).map(|v| (v % 7) as f32 / 7.0).collect()),
            label: GleasonLabel::from_index(label).unwrap(),
            source_id: format!("r{label}"),
        }
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_image(&[0, 255]), vec![-1.0, 1.0]);
        let mid = normalize_image(&[128])[0];
        assert!((mid - 0.003_921_6).abs() < 1e-6, "{mid}");
    }

    #[test]
    fn quantization_round_trip_within_one() {
        for v in 0..=255u8 {
            let back = quantize(normalize_image(&[v])[0]);
            assert!((back as i32 - v as i32).abs() <= 1);
        }
    }

    #[test]
    fn canvas_identity_for_32() {
        let g = Grid::new(32, 32, (0..1024).map(|v| v as f32 / 1024.0).collect());
        assert_eq!(fit_to_canvas(&g), g);
    }

    #[test]
    fn canvas_preserves_constants() {
        let g = Grid::new(16, 16, vec![0.25; 256]);
        let out = fit_to_canvas(&g);
        assert!(out.pixels.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn canvas_geometry_for_wide_image() {
        // 10×35 scales by 32/35 to 9×32, centered vertically from row 11.
        let g = Grid::new(10, 35, vec![0.5; 350]);
        let out = fit_to_canvas(&g);
        let content: Vec<usize> = (0..CANVAS)
            .filter(|&r| (0..CANVAS).all(|c| out.get(r, c) > BACKGROUND))
            .collect();
        assert_eq!(content, (11..20).collect::<Vec<_>>());
        let background_rows = (0..CANVAS).filter(|&r| (0..CANVAS).all(|c| out.get(r, c) == BACKGROUND));
        assert_eq!(background_rows.count(), 23);
    }

    #[test]
    fn batch_sizes_keep_the_tail() {
        let recs: Vec<ImageRecord> = (0..130).map(|i| record(32, 32, i % 9)).collect();
        let sizes: Vec<usize> = batch_iter(&recs, 64, 1, 3).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
    }

    #[test]
    fn epochs_reshuffle_and_repeat() {
        let a = EpochPlan::new(20, 4, 0, 9);
        let b = EpochPlan::new(20, 4, 1, 9);
        assert_ne!(a.order(), b.order());
        assert_eq!(a.order(), EpochPlan::new(20, 4, 0, 9).order());
    }

    #[test]
    fn batches_are_in_range() {
        let recs: Vec<ImageRecord> = (0..10).map(|i| record(12, 20, i % 9)).collect();
        for b in batch_iter(&recs, 4, 2, 5) {
            assert_eq!(&b.images.shape()[1..], &[1, 32, 32]);
            assert!(b.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        std::fs::write(&m, "img.pgm 1\n").unwrap();
        let err = load_manifest(&m).unwrap_err();
        assert_eq!(err.to_string(), "line 1: score 1 not in label set");

        std::fs::write(&m, "# header\n\nnot-a-record\n").unwrap();
        assert!(matches!(load_manifest(&m).unwrap_err(), DataError::Malformed { line: 3, .. }));

        std::fs::write(&m, "a.pgm\tseven\n").unwrap();
        assert!(matches!(load_manifest(&m).unwrap_err(), DataError::Malformed { line: 1, .. }));

        std::fs::write(&m, "").unwrap();
        assert!(load_manifest(&m).unwrap().is_empty());

        assert!(matches!(
            load_manifest(dir.path().join("missing.tsv")).unwrap_err(),
            DataError::Io { .. }
        ));

        GrayImage::filled(8, 12, 0).write(dir.path().join("small.pgm")).unwrap();
        std::fs::write(&m, "small.pgm\t0\n").unwrap();
        assert!(matches!(load_manifest(&m).unwrap_err(), DataError::ImageSize { .. }));
    }

    #[test]
    fn manifest_reads_records() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::filled(32, 32, 0).write(dir.path().join("a.pgm")).unwrap();
        GrayImage::filled(20, 11, 255).write(dir.path().join("b.pgm")).unwrap();
        let m = dir.path().join("m.tsv");
        std::fs::write(&m, "a.pgm\t0\nb.pgm\t9\n").unwrap();
        let recs = load_manifest(&m).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].label.index(), 0);
        assert_eq!(recs[1].label.index(), 8);
        assert_eq!((recs[1].pixels.height, recs[1].pixels.width), (11, 20));
        assert!(recs[1].pixels.pixels.iter().all(|&v| v == 1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn records() -> impl Strategy<Value = Vec<ImageRecord>> {
            prop::collection::vec((MIN_SIDE..=MAX_SIDE, MIN_SIDE..=MAX_SIDE, 0usize..9, any::<u8>()), 1..40).prop_map(|v| {
                v.into_iter()
                    .map(|(h, w, l, shade)| {
                        let raw: Vec<u8> = (0..h * w).map(|i| shade.wrapping_add((i * 37) as u8)).collect();
                        ImageRecord {
                            pixels: Grid::new(h, w, normalize_image(&raw)),
                            label: GleasonLabel::from_index(l).unwrap(),
                            source_id: String::new(),
                        }
                    })
                    .collect()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn batches_are_canvas_sized_and_in_range(recs in records(), bs in 1usize..70, epoch in 1u32..5, seed in any::<u64>()) {
                let plan = EpochPlan::new(recs.len(), bs, epoch, seed);
                let mut seen = 0;
                for b in batch_iter(&recs, bs, epoch, seed) {
                    let n = b.labels.len();
                    prop_assert!(n >= 1 && n <= bs);
                    prop_assert_eq!(b.images.shape(), &[n, 1, CANVAS, CANVAS]);
                    prop_assert!(b.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                    seen += n;
                }
                prop_assert_eq!(seen, recs.len());
                prop_assert_eq!(plan.num_batches(), recs.len().div_ceil(bs));
            }

            #[test]
            fn batches_do_not_depend_on_preparation_order(recs in records(), bs in 1usize..16, seed in any::<u64>()) {
                let plan = EpochPlan::new(recs.len(), bs, 3, seed);
                let forward: Vec<Batch> = (0..plan.num_batches()).map(|i| plan.batch(&recs, i)).collect();
                let mut backward: Vec<Batch> = (0..plan.num_batches()).rev().map(|i| plan.batch(&recs, i)).collect();
                backward.reverse();
                prop_assert_eq!(forward, backward);
            }
        }
    }
}
