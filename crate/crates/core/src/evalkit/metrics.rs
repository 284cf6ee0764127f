use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{random_cell, similarity_heatmap};
use crate::cropper::{self, CropSpec};
use crate::dataset::{self, Dataset, ImageSample};
use crate::encoders::{grid_geometry, CellIndex, CropEncoder, FeatureMap, PyramidEncoder};
use crate::error::{Error, Result};
use crate::seeding;

/// When a cell counts as localized inside a crop rectangle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainmentMode {
    /// The cell center lies in the (closed) crop rectangle.
    #[default]
    Center,
    /// The whole stride-sized cell square lies in the crop rectangle.
    FullCell,
}

impl fmt::Display for ContainmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContainmentMode::Center => "center",
            ContainmentMode::FullCell => "full-cell",
        })
    }
}

impl FromStr for ContainmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(ContainmentMode::Center),
            "full-cell" => Ok(ContainmentMode::FullCell),
            _ => Err(Error::Config(format!(
                "unknown containment mode {s:?} (center | full-cell)"
            ))),
        }
    }
}

pub fn is_localized(
    cell: CellIndex,
    stride: usize,
    crop: &CropSpec,
    mode: ContainmentMode,
) -> bool {
    match mode {
        ContainmentMode::Center => {
            let s = stride as f64;
            crop.contains_point((cell.col as f64 + 0.5) * s, (cell.row as f64 + 0.5) * s)
        }
        ContainmentMode::FullCell => {
            let (x0, y0) = (cell.col * stride, cell.row * stride);
            x0 >= crop.a
                && y0 >= crop.b
                && x0 + stride <= crop.right()
                && y0 + stride <= crop.bottom()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub level: usize,
    pub stride: usize,
    /// Highest-similarity cell.
    pub argmax: CellIndex,
    /// Baseline cell drawn uniformly.
    pub random: CellIndex,
}

/// Everything the metrics need from one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub image_id: String,
    pub crop: CropSpec,
    pub levels: Vec<LevelOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub stride: usize,
    pub sga: f64,
    pub riga: f64,
    /// `None` when no random cell was localized.
    pub gap_r: Option<f64>,
    pub sgi: usize,
    pub rigi: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_images: usize,
    pub mode: ContainmentMode,
    pub seed: u64,
    pub levels: Vec<LevelMetrics>,
    /// Free-form echo of the settings that produced the report.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Serialize)]
struct CsvRow {
    level: usize,
    stride: usize,
    #[serde(rename = "SGA")]
    sga: f64,
    #[serde(rename = "RIGA")]
    riga: f64,
    #[serde(rename = "GAP-R")]
    gap_r: Option<f64>,
    #[serde(rename = "SGI")]
    sgi: usize,
    #[serde(rename = "RIGI")]
    rigi: usize,
    #[serde(rename = "N")]
    n: usize,
}

impl MetricsReport {
    pub fn level(&self, level: usize) -> Option<&LevelMetrics> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        dataset::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for l in &self.levels {
            w.serialize(CsvRow {
                level: l.level,
                stride: l.stride,
                sga: l.sga,
                riga: l.riga,
                gap_r: l.gap_r,
                sgi: l.sgi,
                rigi: l.rigi,
                n: l.n,
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        dataset::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Counts localized argmax and random cells per level.
pub fn score_localization(
    records: &[LocalizationRecord],
    mode: ContainmentMode,
    seed: u64,
) -> MetricsReport {
    let n = records.len();
    let num_levels = records.first().map_or(0, |r| r.levels.len());
    let levels = (0..num_levels)
        .map(|li| {
            let stride = records[0].levels[li].stride;
            let (mut sgi, mut rigi) = (0, 0);
            for r in records {
                let o = &r.levels[li];
                sgi += is_localized(o.argmax, o.stride, &r.crop, mode) as usize;
                rigi += is_localized(o.random, o.stride, &r.crop, mode) as usize;
            }
            let sga = if n > 0 { sgi as f64 / n as f64 } else { 0.0 };
            let riga = if n > 0 { rigi as f64 / n as f64 } else { 0.0 };
            LevelMetrics {
                level: records[0].levels[li].level,
                stride,
                sga,
                riga,
                gap_r: (rigi > 0).then(|| sga / riga),
                sgi,
                rigi,
                n,
            }
        })
        .collect();
    MetricsReport {
        n_images: n,
        mode,
        seed,
        levels,
        provenance: serde_json::Value::Null,
    }
}

/// Source of crop and per-cell embeddings for evaluation.
pub trait EmbeddingProvider: Sync {
    fn strides(&self) -> Vec<usize>;
    fn embed_crop(&self, crop: &ImageSample) -> Vec<f32>;
    fn embed_pyramid(&self, image: &ImageSample) -> Vec<FeatureMap>;
}

/// Borrowed pair of encoders to evaluate.
#[derive(Clone, Copy)]
pub struct EvalModels<'a> {
    pub crop: &'a CropEncoder<f32>,
    pub pyramid: &'a PyramidEncoder<f32>,
}

impl EmbeddingProvider for EvalModels<'_> {
    fn strides(&self) -> Vec<usize> {
        self.pyramid.config.strides()
    }

    fn embed_crop(&self, crop: &ImageSample) -> Vec<f32> {
        self.crop.encode_crop(crop)
    }

    fn embed_pyramid(&self, image: &ImageSample) -> Vec<FeatureMap> {
        self.pyramid.encode_pyramid(image)
    }
}

/// Evaluates one image: seeded crop, heatmap argmax and a random cell per
/// level. The crop and then the random cells come from the
/// `(seed, image id)` stream.
pub fn localize<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    dataset: &Dataset,
    index: usize,
    seed: u64,
) -> Result<LocalizationRecord> {
    let image = dataset.load_normalized(index)?;
    let mut rng = seeding::image_stream(seed, &dataset.manifest.items[index].id);
    let crop = cropper::sample_crop(image.width, image.height, &mut rng)?;
    let z = provider.embed_crop(&cropper::extract_crop(&image, &crop)?);
    let maps = provider.embed_pyramid(&image);
    let heat = similarity_heatmap(&z, &maps, image.width, image.height, Some(crop));
    let grid = grid_geometry(image.width, image.height, &provider.strides());
    let levels = heat
        .levels
        .iter()
        .map(|l| LevelOutcome {
            level: l.level,
            stride: l.stride,
            argmax: l.argmax,
            random: random_cell(&grid, l.level, (image.width, image.height), &mut rng),
        })
        .collect();
    Ok(LocalizationRecord {
        image_id: image.id,
        crop,
        levels,
    })
}

/// Localization records for every image, in dataset order. Runs on the
/// current rayon pool.
pub fn collect_records<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<LocalizationRecord>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(
            "evaluation dataset has no images".into(),
        ));
    }
    (0..dataset.len())
        .into_par_iter()
        .map(|i| localize(provider, dataset, i, seed))
        .collect()
}

pub fn eval_sga_riga<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    dataset: &Dataset,
    seed: u64,
    mode: ContainmentMode,
) -> Result<MetricsReport> {
    let records = collect_records(provider, dataset, seed)?;
    Ok(score_localization(&records, mode, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crop(a: usize, b: usize, s: usize) -> CropSpec {
        CropSpec { a, b, w: s, h: s }
    }

    #[test]
    fn containment_modes() {
        let c = crop(10, 10, 30);
        // Center (12, 12) inside; cell [8, 16) pokes out on the left.
        let cell = CellIndex::new(0, 1, 1);
        assert!(is_localized(cell, 8, &c, ContainmentMode::Center));
        assert!(!is_localized(cell, 8, &c, ContainmentMode::FullCell));
        // Cell [16, 24) fits entirely; boundary touching counts.
        assert!(is_localized(
            CellIndex::new(0, 2, 2),
            8,
            &c,
            ContainmentMode::FullCell
        ));
        assert!(is_localized(
            CellIndex::new(0, 0, 0),
            8,
            &crop(0, 0, 8),
            ContainmentMode::FullCell
        ));
        // Center exactly on the closed boundary.
        assert!(is_localized(
            CellIndex::new(0, 0, 0),
            8,
            &crop(4, 4, 10),
            ContainmentMode::Center
        ));
        assert!(!is_localized(
            CellIndex::new(0, 0, 0),
            8,
            &crop(5, 4, 10),
            ContainmentMode::Center
        ));
    }

    #[test]
    fn mode_strings() {
        assert_eq!(
            "full-cell".parse::<ContainmentMode>().unwrap(),
            ContainmentMode::FullCell
        );
        assert_eq!(ContainmentMode::Center.to_string(), "center");
        assert!("edge".parse::<ContainmentMode>().is_err());
        assert_eq!(
            serde_json::to_string(&ContainmentMode::FullCell).unwrap(),
            "\"full-cell\""
        );
    }

    #[test]
    fn identities_hold() {
        let rec = |inside: bool| LocalizationRecord {
            image_id: "x".into(),
            crop: crop(0, 0, 16),
            levels: vec![LevelOutcome {
                level: 0,
                stride: 8,
                argmax: CellIndex::new(0, 0, if inside { 0 } else { 5 }),
                random: CellIndex::new(0, 0, if inside { 5 } else { 0 }),
            }],
        };
        let recs: Vec<_> = (0..10).map(|i| rec(i < 9)).collect();
        let r = score_localization(&recs, ContainmentMode::Center, 0);
        let l = &r.levels[0];
        assert_eq!((l.sgi, l.rigi, l.n), (9, 1, 10));
        assert_eq!(l.sga, 0.9);
        assert_eq!(l.riga, 0.1);
        assert_eq!(l.gap_r, Some(0.9 / 0.1));
        let none = score_localization(&recs[..9], ContainmentMode::Center, 0);
        assert_eq!(none.levels[0].gap_r, None);
        let csv = r.to_csv();
        assert!(csv.starts_with("level,stride,SGA,RIGA,GAP-R,SGI,RIGI,N\n"));
        assert_eq!(
            serde_json::from_str::<MetricsReport>(&r.to_json()).unwrap(),
            r
        );
    }
}
