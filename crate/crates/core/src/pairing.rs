//! Positive-cell matching and intra-image anchor negatives.
//!
//! The positive for a crop is, on every active pyramid level, the cell whose
//! center is nearest to the crop center after that center has been carried
//! through the full image's flips. Anchor negatives are other cells of the
//! same image and level, drawn uniformly without replacement from cells whose
//! centers lie inside the unpadded content.

use std::convert::TryFrom;

use lococontrast_nn::{Grads, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cropper::{self, AugRecord, CropSpec};
use crate::dataset::{self, ImageSample};
use crate::encoders::{grid_geometry, CellIndex, CropEncoder, PyramidEncoder, PyramidGrid};
use crate::error::{Error, Result};
use crate::loss::{LossGrad, PairBatch};

/// Anchors drawn per image and level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorCount {
    Fixed(usize),
    Rule(AnchorRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorRule {
    /// As many anchors as images in the batch.
    BatchSize,
    /// Half the batch size, rounded down.
    HalfBatch,
}

impl Default for AnchorCount {
    fn default() -> Self {
        AnchorCount::Fixed(10)
    }
}

impl AnchorCount {
    pub fn resolve(self, batch_size: usize) -> usize {
        match self {
            AnchorCount::Fixed(n) => n,
            AnchorCount::Rule(AnchorRule::BatchSize) => batch_size,
            AnchorCount::Rule(AnchorRule::HalfBatch) => batch_size / 2,
        }
    }
}

/// Which pyramid levels contribute to the loss: `"all"` or one level index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LevelsRepr", into = "LevelsRepr")]
pub enum LevelSelection {
    #[default]
    All,
    Only(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LevelsRepr {
    Name(String),
    Level(usize),
}

impl TryFrom<LevelsRepr> for LevelSelection {
    type Error = String;

    fn try_from(r: LevelsRepr) -> std::result::Result<Self, String> {
        match r {
            LevelsRepr::Name(s) if s == "all" => Ok(LevelSelection::All),
            LevelsRepr::Name(s) => s
                .parse()
                .map(LevelSelection::Only)
                .map_err(|_| format!("levels must be \"all\" or a level index, got {s:?}")),
            LevelsRepr::Level(l) => Ok(LevelSelection::Only(l)),
        }
    }
}

impl From<LevelSelection> for LevelsRepr {
    fn from(l: LevelSelection) -> Self {
        match l {
            LevelSelection::All => LevelsRepr::Name("all".into()),
            LevelSelection::Only(l) => LevelsRepr::Level(l),
        }
    }
}

impl LevelSelection {
    pub fn resolve(self, num_levels: usize) -> Result<Vec<usize>> {
        match self {
            LevelSelection::All => Ok((0..num_levels).collect()),
            LevelSelection::Only(l) if l < num_levels => Ok(vec![l]),
            LevelSelection::Only(l) => {
                Err(Error::Config(format!("level {l} outside 0..{num_levels}")))
            }
        }
    }
}

/// Nearest cell center to `(x, y)` on `level`; ties go to the smaller
/// `(row, col)`.
pub fn select_positive(grid: &PyramidGrid, level: usize, (x, y): (f64, f64)) -> CellIndex {
    let lg = grid.level(level);
    let s = lg.stride as f64;
    // Squared distance separates per axis, so the 2-d argmin with
    // lexicographic ties is the per-axis argmin with smaller-index ties.
    let nearest = |p: f64, n: usize| -> usize {
        let t = p / s - 0.5;
        let lo = t.floor().clamp(0.0, (n - 1) as f64) as usize;
        let hi = (lo + 1).min(n - 1);
        let d = |i: usize| ((i as f64 + 0.5) * s - p).abs();
        if d(hi) < d(lo) {
            hi
        } else {
            lo
        }
    };
    CellIndex::new(level, nearest(y, lg.rows), nearest(x, lg.cols))
}

/// `count` distinct cells of `level`, none equal to `positive`, uniform
/// without replacement over cells centered inside the `content` extent.
pub fn sample_anchor_negatives<R: Rng + ?Sized>(
    grid: &PyramidGrid,
    level: usize,
    positive: CellIndex,
    count: usize,
    content: (usize, usize),
    rng: &mut R,
) -> Vec<CellIndex> {
    let (rows, cols) = grid.level(level).cells_within(content.0, content.1);
    let pool: Vec<CellIndex> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| CellIndex::new(level, r, c)))
        .filter(|&c| c != positive)
        .collect();
    if count >= pool.len() {
        if count > pool.len() {
            log::warn!(
                "level {level}: only {} non-positive cells for {count} anchors; using all of them",
                pool.len()
            );
        }
        return pool;
    }
    rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// One image readied for both pipelines.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    /// Crop content after pipeline-1 flips.
    pub crop_image: ImageSample,
    /// Full image after pipeline-2 flips (not yet padded).
    pub full_image: ImageSample,
    /// Crop rectangle on the un-augmented image.
    pub crop: CropSpec,
    pub crop_aug: AugRecord,
    pub full_aug: AugRecord,
}

impl PreparedExample {
    /// Samples the crop on the original image, then draws flips for the crop
    /// and for the full image, in that order.
    pub fn new<R: Rng + ?Sized>(image: &ImageSample, rng: &mut R) -> Result<Self> {
        let crop = cropper::sample_crop(image.width, image.height, rng)?;
        let raw_crop = cropper::extract_crop(image, &crop)?;
        let crop_aug = cropper::sample_flips(crop.w, crop.h, rng);
        let full_aug = cropper::sample_flips(image.width, image.height, rng);
        Ok(Self {
            crop_image: cropper::apply_flips(&raw_crop, &crop_aug)?,
            full_image: cropper::apply_flips(image, &full_aug)?,
            crop,
            crop_aug,
            full_aug,
        })
    }

    /// Crop center in the coordinates of the flipped full image.
    pub fn mapped_center(&self) -> (f64, f64) {
        cropper::map_point(&self.full_aug, self.crop.center())
    }
}

/// Cells chosen for one image: positives and anchors per active level.
#[derive(Clone, Debug, PartialEq)]
pub struct PairAssignment {
    pub mapped_center: (f64, f64),
    pub positives: Vec<CellIndex>,
    pub anchors: Vec<Vec<CellIndex>>,
}

pub fn plan_pairs<R: Rng + ?Sized>(
    example: &PreparedExample,
    grid: &PyramidGrid,
    levels: &[usize],
    anchors_per_image: usize,
    rng: &mut R,
) -> PairAssignment {
    let center = example.mapped_center();
    let content = (example.full_image.width, example.full_image.height);
    let mut positives = Vec::with_capacity(levels.len());
    let mut anchors = Vec::with_capacity(levels.len());
    for &l in levels {
        let pos = select_positive(grid, l, center);
        anchors.push(sample_anchor_negatives(
            grid,
            l,
            pos,
            anchors_per_image,
            content,
            rng,
        ));
        positives.push(pos);
    }
    PairAssignment {
        mapped_center: center,
        positives,
        anchors,
    }
}

/// Forward passes of both pipelines over one batch, with the recorded graphs
/// kept alive for the backward pass.
pub struct ForwardBatch<'m, F: Scalar> {
    pub levels: Vec<usize>,
    /// One per active level.
    pub pairs: Vec<PairBatch>,
    pub assignments: Vec<PairAssignment>,
    pub grid: PyramidGrid,
    crop_graphs: Vec<(Graph<'m, F>, Var)>,
    /// Per image, per active level: `[1 + anchors, d]`, positive first.
    pyramid_graphs: Vec<(Graph<'m, F>, Vec<Var>)>,
}

/// Runs both encoders over a batch and gathers positive and anchor cell
/// embeddings into one [`PairBatch`] per active level.
///
/// Images are padded bottom-right to a common size; `rngs` supplies one
/// stream per image for anchor sampling.
pub fn assemble_pair_batch<'m, F: Scalar, R: Rng>(
    examples: &[PreparedExample],
    crop_encoder: &'m CropEncoder<F>,
    pyramid_encoder: &'m PyramidEncoder<F>,
    levels: &[usize],
    anchors_per_image: usize,
    rngs: &mut [R],
) -> Result<ForwardBatch<'m, F>> {
    if examples.is_empty() {
        return Err(Error::ContractViolation(
            "batch must hold at least one image".into(),
        ));
    }
    if rngs.len() != examples.len() {
        return Err(Error::ContractViolation(
            "one rng stream per image required".into(),
        ));
    }
    let padded = dataset::pad_batch(examples.iter().map(|e| e.full_image.clone()).collect())?;
    let (pw, ph) = padded.padded_dims();
    let grid = grid_geometry(pw, ph, &pyramid_encoder.config.strides());
    let d = pyramid_encoder.config.embed_dim;

    let mut pairs: Vec<PairBatch> = levels
        .iter()
        .map(|_| PairBatch {
            dim: d,
            ..Default::default()
        })
        .collect();
    let mut assignments = Vec::with_capacity(examples.len());
    let mut crop_graphs = Vec::with_capacity(examples.len());
    let mut pyramid_graphs = Vec::with_capacity(examples.len());

    for ((example, full), rng) in examples.iter().zip(&padded.images).zip(rngs.iter_mut()) {
        let plan = plan_pairs(example, &grid, levels, anchors_per_image, rng);

        let mut cg = Graph::new(&crop_encoder.params);
        let z_i = crop_encoder.forward(&mut cg, &example.crop_image);
        let z_i_vals = to_f64_rows(cg.value(z_i));

        let mut pg = Graph::new(&pyramid_encoder.params);
        let maps = pyramid_encoder.forward_levels(&mut pg, full);
        let mut level_vars = Vec::with_capacity(levels.len());
        for (li, &l) in levels.iter().enumerate() {
            let cols = grid.level(l).cols;
            let flat = |c: &CellIndex| c.row * cols + c.col;
            let cells: Vec<usize> = std::iter::once(flat(&plan.positives[li]))
                .chain(plan.anchors[li].iter().map(flat))
                .collect();
            let z = pyramid_encoder.embed_cells(&mut pg, maps[l], cells);
            let mut rows = to_f64_rows(pg.value(z));
            let anchors = rows.split_off(1);
            pairs[li].crops.push(z_i_vals[0].clone());
            pairs[li].positives.push(rows.pop().expect("positive row"));
            pairs[li].anchors.push(anchors);
            level_vars.push(z);
        }
        crop_graphs.push((cg, z_i));
        pyramid_graphs.push((pg, level_vars));
        assignments.push(plan);
    }

    Ok(ForwardBatch {
        levels: levels.to_vec(),
        pairs,
        assignments,
        grid,
        crop_graphs,
        pyramid_graphs,
    })
}

impl<F: Scalar> ForwardBatch<'_, F> {
    /// Backpropagates per-level embedding gradients into both encoders.
    pub fn backward(
        &self,
        level_grads: &[LossGrad],
        crop_grads: &mut Grads<F>,
        pyramid_grads: &mut Grads<F>,
    ) {
        assert_eq!(
            level_grads.len(),
            self.levels.len(),
            "one gradient per active level"
        );
        for (k, (g, z)) in self.crop_graphs.iter().enumerate() {
            let d = self.pairs[0].dim;
            let mut seed = vec![F::zero(); d];
            for lg in level_grads {
                for (s, &v) in seed.iter_mut().zip(&lg.d_crops[k]) {
                    *s += F::from_f64_lossy(v);
                }
            }
            g.backward(&[(*z, &Tensor::from_vec(&[1, d], seed))], crop_grads);
        }
        for (k, (g, vars)) in self.pyramid_graphs.iter().enumerate() {
            let seeds: Vec<Tensor<F>> = level_grads
                .iter()
                .map(|lg| {
                    let rows: Vec<F> = std::iter::once(&lg.d_positives[k])
                        .chain(&lg.d_anchors[k])
                        .flat_map(|r| r.iter().map(|&v| F::from_f64_lossy(v)))
                        .collect();
                    let n = 1 + lg.d_anchors[k].len();
                    Tensor::from_vec(&[n, rows.len() / n], rows)
                })
                .collect();
            let pairs: Vec<(Var, &Tensor<F>)> = vars.iter().copied().zip(seeds.iter()).collect();
            g.backward(&pairs, pyramid_grads);
        }
    }
}

fn to_f64_rows<F: Scalar>(t: &Tensor<F>) -> Vec<Vec<f64>> {
    let (n, _) = t.rc();
    (0..n)
        .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}
