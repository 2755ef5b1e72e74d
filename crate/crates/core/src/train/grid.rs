//! Fixed-noise evaluation grid: one row per class, one column per snapshot.

use rand::Rng;

use crate::data::{fit_to_canvas, quantize, GrayImage, Grid, ImageRecord, BACKGROUND, CANVAS};
use crate::nets::{Generator, GleasonLabel, NetError, N_CLASSES};
use crate::tensor::Tensor;

/// Pixels between tiles.
pub const GAP: usize = 2;
/// Fill value of the gaps.
pub const GAP_VALUE: u8 = 0;

/// Noise `ẑ_c` drawn once per class before training.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    /// `[N_CLASSES, z_dim]`, row `c` belongs to class index `c`.
    pub z: Tensor,
}

/// Nine tiles, ascending score.
pub type Column = Vec<Grid>;

impl EvalGrid {
    pub fn sample<R: Rng + ?Sized>(z_dim: usize, rng: &mut R) -> Self {
        Self {
            z: super::sample_noise(N_CLASSES, z_dim, rng),
        }
    }

    pub fn labels() -> Vec<GleasonLabel> {
        GleasonLabel::all().collect()
    }

    /// Eval-mode generator output for every class.
    pub fn column(&self, gen: &Generator) -> Result<Column, NetError> {
        let out = gen.generate(&self.z, &Self::labels())?;
        let s = gen.arch().image_size;
        Ok(out
            .data()
            .chunks(s * s)
            .map(|c| Grid::new(s, s, c.to_vec()))
            .collect())
    }
}

/// First record of each class, fitted to the canvas; background tiles for
/// classes without records.
pub fn real_reference(records: &[ImageRecord]) -> Column {
    GleasonLabel::all()
        .map(|l| match records.iter().find(|r| r.label == l) {
            Some(r) => fit_to_canvas(&r.pixels),
            None => Grid::new(CANVAS, CANVAS, vec![BACKGROUND; CANVAS * CANVAS]),
        })
        .collect()
}

/// Lays columns side by side with [`GAP`]-pixel separators.
///
/// The image is `(rows·S + (rows−1)·GAP)` high and
/// `(cols·S + (cols−1)·GAP)` wide.
pub fn compose(columns: &[Column]) -> GrayImage {
    assert!(!columns.is_empty(), "grid needs at least one column");
    let rows = columns[0].len();
    let s = columns[0][0].height;
    let height = rows * s + (rows - 1) * GAP;
    let width = columns.len() * s + (columns.len() - 1) * GAP;
    let mut px = vec![GAP_VALUE; height * width];
    for (ci, col) in columns.iter().enumerate() {
        assert_eq!(col.len(), rows, "ragged grid");
        for (ri, tile) in col.iter().enumerate() {
            let (top, left) = (ri * (s + GAP), ci * (s + GAP));
            for y in 0..s {
                for x in 0..s {
                    px[(top + y) * width + left + x] = quantize(tile.get(y, x));
                }
            }
        }
    }
    GrayImage::new(width, height, px)
}

/// Splits a single-column tile image back into its tiles (inverse of
/// [`compose`] for one column, up to quantization).
pub fn split_column(img: &GrayImage, tile: usize) -> Option<Column> {
    let rows = (img.height + GAP) / (tile + GAP);
    if img.width != tile || rows * tile + rows.saturating_sub(1) * GAP != img.height {
        return None;
    }
    Some(
        (0..rows)
            .map(|r| {
                let start = r * (tile + GAP) * tile;
                let raw = &img.pixels[start..start + tile * tile];
                Grid::new(tile, tile, crate::data::normalize_image(raw))
            })
            .collect(),
    )
}

/// Appends the epoch's column to `columns` and returns the grid so far with
/// the real-reference column (when given) as the last column.
pub fn emit_epoch_grid(
    gen: &Generator,
    grid: &EvalGrid,
    columns: &mut Vec<Column>,
    real_refs: Option<&Column>,
) -> Result<GrayImage, NetError> {
    columns.push(grid.column(gen)?);
    let mut all = columns.clone();
    all.extend(real_refs.cloned());
    Ok(compose(&all))
}
