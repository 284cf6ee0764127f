//! Zero-shot evaluation: similarity heatmaps, grid-accuracy metrics against a
//! random-cell baseline, top-k retrieval, and PNG rendering.

mod metrics;
mod render;
mod retrieval;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cropper::CropSpec;
use crate::encoders::{CellIndex, FeatureMap, PyramidGrid};

pub use metrics::{
    collect_records, eval_sga_riga, is_localized, localize, score_localization, ContainmentMode,
    EmbeddingProvider, EvalModels, LevelMetrics, LevelOutcome, LocalizationRecord, MetricsReport,
};
pub use render::{colormap, render_contact_sheet, render_heatmap, HeatmapFiles, RenderOptions};
pub use retrieval::{image_score, rank_images, retrieve_topk, RetrievalHit, RetrievalResult};

/// Cosine similarities of one query against every cell of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelHeatmap {
    pub level: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols`.
    pub values: Vec<f32>,
    pub argmax: CellIndex,
}

impl LevelHeatmap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn argmax_center(&self) -> (f64, f64) {
        let s = self.stride as f64;
        (
            (self.argmax.col as f64 + 0.5) * s,
            (self.argmax.row as f64 + 0.5) * s,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Dims of the image the maps were computed on.
    pub width: usize,
    pub height: usize,
    pub crop: Option<CropSpec>,
    pub levels: Vec<LevelHeatmap>,
}

/// Row-major index of the first strictly greatest value.
pub(crate) fn first_argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scores `query` against every cell of every map. Ties for the maximum go to
/// the lowest `(row, col)`.
pub fn similarity_heatmap(
    query: &[f32],
    maps: &[FeatureMap],
    width: usize,
    height: usize,
    crop: Option<CropSpec>,
) -> Heatmap {
    let levels = maps
        .iter()
        .map(|m| {
            assert_eq!(m.dim, query.len(), "query and feature map widths differ");
            let values: Vec<f32> = m
                .data
                .chunks_exact(m.dim)
                .map(|cell| {
                    cell.iter()
                        .zip(query)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>() as f32
                })
                .collect();
            let i = first_argmax(&values);
            LevelHeatmap {
                level: m.level,
                stride: m.stride,
                rows: m.rows,
                cols: m.cols,
                argmax: CellIndex::new(m.level, i / m.cols, i % m.cols),
                values,
            }
        })
        .collect();
    Heatmap {
        width,
        height,
        crop,
        levels,
    }
}

/// Bilinear upsampling of one level to `width x height` pixels, with each
/// cell's value sitting at its cell center and clamped beyond the outermost
/// centers.
pub fn upsample_level(level: &LevelHeatmap, width: usize, height: usize) -> Vec<f32> {
    let s = level.stride as f64;
    let axis = |p: usize, n: usize| -> (usize, usize, f64) {
        let t = ((p as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = t.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, t - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, level.cols)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (r0, r1, fy) = axis(y, level.rows);
        for &(c0, c1, fx) in &xs {
            let top = level.get(r0, c0) as f64 * (1.0 - fx) + level.get(r0, c1) as f64 * fx;
            let bottom = level.get(r1, c0) as f64 * (1.0 - fx) + level.get(r1, c1) as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Equal-weight mean of all levels, each upsampled to the image size.
/// Row-major `height * width`.
pub fn combine_levels(heatmap: &Heatmap) -> Vec<f32> {
    assert!(!heatmap.levels.is_empty(), "heatmap has no levels");
    let (w, h) = (heatmap.width, heatmap.height);
    let mut acc = vec![0f64; w * h];
    for level in &heatmap.levels {
        for (a, v) in acc.iter_mut().zip(upsample_level(level, w, h)) {
            *a += v as f64;
        }
    }
    let n = heatmap.levels.len() as f64;
    acc.into_iter().map(|v| (v / n) as f32).collect()
}

/// Uniform draw over the cells of `level` whose centers lie inside the
/// `content` extent.
pub fn random_cell<R: Rng + ?Sized>(
    grid: &PyramidGrid,
    level: usize,
    content: (usize, usize),
    rng: &mut R,
) -> CellIndex {
    let (rows, cols) = grid.level(level).cells_within(content.0, content.1);
    let i = rng.gen_range(0..rows * cols);
    CellIndex::new(level, i / cols, i % cols)
}
