//! Quantitative stand-ins for visual inspection of generated images:
//! checkerboard artifact energy, per-class darkness of the central region,
//! and a nearest-centroid classifier that measures whether samples look like
//! the class they were conditioned on.

use rand::Rng;
use thiserror::Error;

use crate::data::{fit_to_canvas, Grid, ImageRecord, CANVAS};
use crate::nets::{Generator, GleasonLabel, NetError, N_CLASSES};
use crate::rng;
use crate::train::{sample_noise, EvalGrid, TrainState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no training images for score {0}")]
    MissingClass(GleasonLabel),
    #[error("{images} images but {labels} labels")]
    LengthMismatch { images: usize, labels: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: std::path::PathBuf,
        source: crate::train::TrainError,
    },
}

/// Energy of a perfect ±1 checkerboard on the canvas: every valid 2×2
/// response is ±4, so `31·31·16 / (32·32)`.
pub const CHECKERBOARD_MAX: f32 = 15.015625;

/// Side of the central crop used for darkness.
pub const CROP: usize = 16;

/// `Σ (x ⊛ k)² / Σ x²` with `k = [[1, −1], [−1, 1]]` over the valid region.
///
/// Zero for images with `Σ x² < 1e-12`.
pub fn checkerboard_energy(img: &Grid) -> f32 {
    let total: f64 = img.pixels.iter().map(|&v| (v as f64).powi(2)).sum();
    if total < 1e-12 || img.height < 2 || img.width < 2 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for y in 0..img.height - 1 {
        for x in 0..img.width - 1 {
            let r = img.get(y, x) as f64 - img.get(y, x + 1) as f64 - img.get(y + 1, x) as f64
                + img.get(y + 1, x + 1) as f64;
            acc += r * r;
        }
    }
    (acc / total) as f32
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f32]) -> f32 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean intensity of the central `CROP × CROP` window (the whole image if it
/// is smaller).
pub fn crop_mean(img: &Grid) -> f32 {
    let (h, w) = (img.height.min(CROP), img.width.min(CROP));
    let (top, left) = ((img.height - h) / 2, (img.width - w) / 2);
    let mut sum = 0.0f64;
    for y in top..top + h {
        for x in left..left + w {
            sum += img.get(y, x) as f64;
        }
    }
    (sum / (h * w) as f64) as f32
}

/// Per-class mean of [`crop_mean`], indexed by class index (ascending score).
/// Lower is darker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Darkness {
    pub per_class: [Option<f32>; N_CLASSES],
}

impl Darkness {
    pub fn get(&self, label: GleasonLabel) -> Option<f32> {
        self.per_class[label.index()]
    }

    /// Classes without any image.
    pub fn missing(&self) -> Vec<GleasonLabel> {
        GleasonLabel::all().filter(|l| self.get(*l).is_none()).collect()
    }
}

pub fn class_darkness(images: &[Grid], labels: &[GleasonLabel]) -> Result<Darkness, EvalError> {
    if images.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let mut sum = [0.0f64; N_CLASSES];
    let mut count = [0usize; N_CLASSES];
    for (img, l) in images.iter().zip(labels) {
        sum[l.index()] += crop_mean(img) as f64;
        count[l.index()] += 1;
    }
    let mut per_class = [None; N_CLASSES];
    for c in 0..N_CLASSES {
        if count[c] > 0 {
            per_class[c] = Some((sum[c] / count[c] as f64) as f32);
        }
    }
    Ok(Darkness { per_class })
}

fn on_canvas(g: &Grid) -> std::borrow::Cow<'_, Grid> {
    if g.height == CANVAS && g.width == CANVAS {
        std::borrow::Cow::Borrowed(g)
    } else {
        std::borrow::Cow::Owned(fit_to_canvas(g))
    }
}

/// Nearest class-mean image under L2 distance.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    /// One canvas-sized mean image per class index.
    pub centroids: Vec<Grid>,
}

impl CentroidModel {
    /// Records of other sizes are fitted to the canvas first.
    pub fn fit(records: &[ImageRecord]) -> Result<Self, EvalError> {
        let n = CANVAS * CANVAS;
        let mut sums = vec![vec![0.0f64; n]; N_CLASSES];
        let mut count = [0usize; N_CLASSES];
        for r in records {
            let c = r.label.index();
            for (s, &v) in sums[c].iter_mut().zip(&on_canvas(&r.pixels).pixels) {
                *s += v as f64;
            }
            count[c] += 1;
        }
        let centroids = GleasonLabel::all()
            .map(|l| {
                let c = l.index();
                if count[c] == 0 {
                    return Err(EvalError::MissingClass(l));
                }
                let px = sums[c].iter().map(|&s| (s / count[c] as f64) as f32).collect();
                Ok(Grid::new(CANVAS, CANVAS, px))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { centroids })
    }

    /// Ties go to the lowest class index.
    pub fn predict(&self, img: &Grid) -> GleasonLabel {
        let img = on_canvas(img);
        let mut best = (f64::INFINITY, 0);
        for (c, centroid) in self.centroids.iter().enumerate() {
            let d: f64 = centroid
                .pixels
                .iter()
                .zip(&img.pixels)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        GleasonLabel::from_index(best.1).expect("centroid per class")
    }

    /// Fraction of `(image, label)` pairs predicted correctly; 0 when empty.
    pub fn accuracy<'a>(&self, pairs: impl IntoIterator<Item = (&'a Grid, GleasonLabel)>) -> f32 {
        let (mut hit, mut n) = (0usize, 0usize);
        for (img, label) in pairs {
            hit += (self.predict(img) == label) as usize;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            hit as f32 / n as f32
        }
    }

    pub fn record_accuracy(&self, records: &[ImageRecord]) -> f32 {
        self.accuracy(records.iter().map(|r| (&r.pixels, r.label)))
    }
}

/// Eval-mode samples, one per label, from fresh uniform noise.
pub fn sample_images<R: Rng + ?Sized>(
    gen: &Generator,
    labels: &[GleasonLabel],
    rng: &mut R,
) -> Result<Vec<Grid>, NetError> {
    const CHUNK: usize = 64;
    let s = gen.arch().image_size;
    let mut out = Vec::with_capacity(labels.len());
    for chunk in labels.chunks(CHUNK) {
        let z = sample_noise(chunk.len(), gen.arch().z_dim, rng);
        let imgs = gen.generate(&z, chunk)?;
        out.extend(imgs.data().chunks(s * s).map(|c| Grid::new(s, s, c.to_vec())));
    }
    Ok(out)
}

/// Metrics of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactRow {
    pub epoch: u32,
    /// Median checkerboard energy over the fixed-noise grid column.
    pub cb_energy: f32,
    /// Centroid accuracy on the generated samples.
    pub acc: f32,
    pub darkness: Darkness,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArtifactReport {
    pub rows: Vec<ArtifactRow>,
}

impl ArtifactReport {
    pub fn header() -> String {
        let mut h = String::from("epoch,cb_energy,acc");
        for l in GleasonLabel::all() {
            h.push_str(&format!(",dark_{}", l.score()));
        }
        h
    }

    /// Missing classes leave their darkness field empty.
    pub fn to_csv(&self) -> String {
        let mut s = Self::header();
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{}", r.epoch, r.cb_energy, r.acc));
            for d in r.darkness.per_class {
                s.push(',');
                if let Some(d) = d {
                    s.push_str(&d.to_string());
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Scores a generator: grid artifact energy plus accuracy and darkness of
/// `per_class` fresh samples of every class.
pub fn evaluate_generator<R: Rng + ?Sized>(
    epoch: u32,
    gen: &Generator,
    grid: &EvalGrid,
    model: &CentroidModel,
    per_class: usize,
    rng: &mut R,
) -> Result<ArtifactRow, EvalError> {
    let column = grid.column(gen)?;
    let energies: Vec<f32> = column.iter().map(checkerboard_energy).collect();
    let labels: Vec<GleasonLabel> = GleasonLabel::all()
        .flat_map(|l| std::iter::repeat(l).take(per_class))
        .collect();
    let samples = sample_images(gen, &labels, rng)?;
    Ok(ArtifactRow {
        epoch,
        cb_energy: median(&energies),
        acc: model.accuracy(samples.iter().zip(labels.iter().copied())),
        darkness: class_darkness(&samples, &labels)?,
    })
}

/// One report row per checkpoint. Samples for a checkpoint at epoch `e` come
/// from the stream `(seed, SAMPLES, e)`, so rows do not depend on which other
/// checkpoints are evaluated.
pub fn evaluate_checkpoints(
    paths: &[std::path::PathBuf],
    model: &CentroidModel,
    per_class: usize,
    seed: u64,
) -> Result<ArtifactReport, EvalError> {
    let mut report = ArtifactReport::default();
    for path in paths {
        let state = TrainState::load(path).map_err(|source| EvalError::Checkpoint {
            path: path.clone(),
            source,
        })?;
        let mut r = rng::stream(seed, &[rng::TAG_SAMPLES, state.epoch as u64]);
        report
            .rows
            .push(evaluate_generator(state.epoch, &state.gen, &state.grid, model, per_class, &mut r)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::phantom_records;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn canvas(f: impl Fn(usize, usize) -> f32) -> Grid {
        let px = (0..CANVAS * CANVAS).map(|i| f(i / CANVAS, i % CANVAS)).collect();
        Grid::new(CANVAS, CANVAS, px)
    }

    fn checkerboard() -> Grid {
        canvas(|y, x| if (y + x) % 2 == 0 { 1.0 } else { -1.0 })
    }

    #[test]
    fn energy_examples() {
        assert_eq!(checkerboard_energy(&canvas(|_, _| 0.7)), 0.0);
        assert_eq!(checkerboard_energy(&canvas(|_, _| 0.0)), 0.0);
        assert_eq!(checkerboard_energy(&checkerboard()), CHECKERBOARD_MAX);
        let ramp = canvas(|y, x| -1.0 + (y as f32 * 0.03) + (x as f32 * 0.02));
        assert!(checkerboard_energy(&ramp) < 1e-6);
    }

    #[test]
    fn checkerboard_dominates_random_images() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..200 {
            let px = (0..CANVAS * CANVAS).map(|_| rand::Rng::gen_range(&mut r, -1.0f32..1.0)).collect();
            let g = Grid::new(CANVAS, CANVAS, px);
            assert!(checkerboard_energy(&g) < CHECKERBOARD_MAX);
        }
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn darkness_examples() {
        let labels: Vec<_> = GleasonLabel::all().collect();
        let dark: Vec<_> = labels.iter().map(|_| canvas(|_, _| -1.0)).collect();
        let d = class_darkness(&dark, &labels).unwrap();
        assert!(d.per_class.iter().all(|&v| v == Some(-1.0)));

        // single image: the crop mean of that image, outside pixels ignored
        let img = canvas(|y, x| if (8..24).contains(&y) && (8..24).contains(&x) { 0.25 } else { 1.0 });
        let d = class_darkness(&[img], &labels[2..3]).unwrap();
        assert_eq!(d.per_class[2], Some(0.25));
        assert_eq!(d.missing().len(), N_CLASSES - 1);
        assert!(class_darkness(&dark[..2], &labels).is_err());
    }

    #[test]
    fn phantom_darkness_separates_extremes() {
        let recs = phantom_records(500, 3);
        let sel: Vec<_> = recs
            .iter()
            .filter(|r| matches!(r.label.score(), 0 | 9))
            .collect();
        let imgs: Vec<Grid> = sel.iter().map(|r| fit_to_canvas(&r.pixels)).collect();
        let labels: Vec<_> = sel.iter().map(|r| r.label).collect();
        let d = class_darkness(&imgs, &labels).unwrap();
        let (d0, d9) = (d.per_class[0].unwrap(), d.per_class[8].unwrap());
        assert!(d9 < d0 - 0.15, "dark_0 {d0} dark_9 {d9}");
    }

    #[test]
    fn centroids_classify_themselves() {
        let model = CentroidModel::fit(&phantom_records(8, 1)).unwrap();
        let pairs = model.centroids.iter().zip(GleasonLabel::all());
        assert_eq!(model.accuracy(pairs), 1.0);
    }

    #[test]
    fn missing_class_is_an_error() {
        let recs: Vec<_> = phantom_records(2, 1).into_iter().filter(|r| r.label.score() != 7).collect();
        assert!(matches!(CentroidModel::fit(&recs), Err(EvalError::MissingClass(l)) if l.score() == 7));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let flat = canvas(|_, _| 0.0);
        let model = CentroidModel {
            centroids: vec![flat.clone(); N_CLASSES],
        };
        assert_eq!(model.predict(&flat).index(), 0);
    }

    #[test]
    fn held_out_phantoms_are_separable() {
        let model = CentroidModel::fit(&phantom_records(64, 100)).unwrap();
        let acc = model.record_accuracy(&phantom_records(64, 200));
        assert!(acc >= 0.80, "held-out accuracy {acc}");
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let train = phantom_records(16, 5);
        let test = phantom_records(56, 6);
        let mut r = rng::stream(7, &[]);
        let (mut hit, mut n) = (0usize, 0usize);
        for _ in 0..20 {
            let mut tr = train.clone();
            let mut labels: Vec<_> = tr.iter().map(|x| x.label).collect();
            labels.shuffle(&mut r);
            for (x, l) in tr.iter_mut().zip(labels) {
                x.label = l;
            }
            let Ok(model) = CentroidModel::fit(&tr) else { continue };
            for x in &test {
                let y = GleasonLabel::sample(&mut r);
                hit += (model.predict(&x.pixels) == y) as usize;
                n += 1;
            }
        }
        assert!(n >= 10_000);
        let acc = hit as f64 / n as f64;
        assert!((acc - 1.0 / 9.0).abs() < 0.02, "{acc}");
    }

    #[test]
    fn report_csv_layout() {
        let mut darkness = Darkness { per_class: [Some(-0.5); N_CLASSES] };
        darkness.per_class[3] = None;
        let report = ArtifactReport {
            rows: vec![ArtifactRow { epoch: 5, cb_energy: 0.25, acc: 0.5, darkness }],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,cb_energy,acc,dark_0,dark_2,dark_3,dark_4,dark_5,dark_6,dark_7,dark_8,dark_9"
        );
        assert_eq!(lines.next().unwrap(), "5,0.25,0.5,-0.5,-0.5,-0.5,,-0.5,-0.5,-0.5,-0.5,-0.5");
    }

    fn any_canvas() -> impl Strategy<Value = Grid> {
        prop::collection::vec(-1.0f32..1.0, CANVAS * CANVAS).prop_map(|px| Grid::new(CANVAS, CANVAS, px))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn energy_is_sign_invariant(g in any_canvas()) {
            let neg = Grid::new(CANVAS, CANVAS, g.pixels.iter().map(|v| -v).collect());
            prop_assert_eq!(checkerboard_energy(&g), checkerboard_energy(&neg));
            prop_assert!(checkerboard_energy(&g) >= 0.0);
        }

        #[test]
        fn kernel_annihilates_constants(g in any_canvas(), c in -0.5f32..0.5) {
            // the numerator is unchanged; compare it through the denominators
            let shifted = Grid::new(CANVAS, CANVAS, g.pixels.iter().map(|v| v + c).collect());
            let ss = |g: &Grid| g.pixels.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            let num = |g: &Grid| checkerboard_energy(g) as f64 * ss(g);
            let (a, b) = (num(&g), num(&shifted));
            prop_assert!((a - b).abs() <= 1e-4 * a.max(1.0), "{} vs {}", a, b);
        }

        #[test]
        fn darkening_one_class_moves_only_it(delta in 0.01f32..1.0, class in 0usize..N_CLASSES, seed in 0u64..1000) {
            let recs = phantom_records(2, seed);
            let imgs: Vec<Grid> = recs.iter().map(|r| r.pixels.clone()).collect();
            let labels: Vec<_> = recs.iter().map(|r| r.label).collect();
            let before = class_darkness(&imgs, &labels).unwrap();
            let darker: Vec<Grid> = imgs.iter().zip(&labels).map(|(g, l)| {
                if l.index() == class {
                    Grid::new(g.height, g.width, g.pixels.iter().map(|v| v - delta).collect())
                } else {
                    g.clone()
                }
            }).collect();
            let after = class_darkness(&darker, &labels).unwrap();
            for c in 0..N_CLASSES {
                let (b, a) = (before.per_class[c].unwrap(), after.per_class[c].unwrap());
                if c == class {
                    prop_assert!((b - a - delta).abs() < 1e-5);
                } else {
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn prediction_ignores_training_order(seed in 0u64..1000) {
            let recs = phantom_records(4, 9);
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rng::stream(seed, &[]));
            let (a, b) = (CentroidModel::fit(&recs).unwrap(), CentroidModel::fit(&shuffled).unwrap());
            let probe = phantom_records(1, seed);
            for r in &probe {
                prop_assert_eq!(a.predict(&r.pixels), b.predict(&r.pixels));
            }
        }
    }
}
