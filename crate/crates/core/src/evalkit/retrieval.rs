use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EmbeddingProvider;
use crate::cropper::{self, CropSpec};
use crate::dataset::{Dataset, ImageSample};
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub rank: usize,
    pub image_id: String,
    /// Position in the searched dataset.
    pub index: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_image: String,
    pub query_crop: CropSpec,
    pub k: usize,
    pub hits: Vec<RetrievalHit>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Best cell similarity anywhere in the pyramid: per-level max, then the max
/// over levels.
pub fn image_score(query: &[f32], maps: &[FeatureMap]) -> f32 {
    maps.iter()
        .map(|m| {
            m.data
                .chunks_exact(m.dim)
                .map(|c| {
                    c.iter()
                        .zip(query)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>() as f32
                })
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .fold(f32::NEG_INFINITY, f32::max)
}

/// Ranks every dataset image against `query`; the `k` best come back, ties in
/// dataset order.
pub fn rank_images<P: EmbeddingProvider + ?Sized>(
    query: &[f32],
    provider: &P,
    dataset: &Dataset,
    k: usize,
) -> Result<Vec<RetrievalHit>> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(
            "retrieval dataset has no images".into(),
        ));
    }
    let scores = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let img = dataset.load_normalized(i)?;
            Ok(image_score(query, &provider.embed_pyramid(&img)))
        })
        .collect::<Result<Vec<f32>>>()?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps dataset order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, i)| RetrievalHit {
            rank: rank + 1,
            image_id: dataset.manifest.items[i].id.clone(),
            index: i,
            score: scores[i],
        })
        .collect())
}

/// Embeds `crop` of `query_image` and retrieves the top `k` dataset images.
pub fn retrieve_topk<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    query_image: &ImageSample,
    crop: CropSpec,
    dataset: &Dataset,
    k: usize,
) -> Result<RetrievalResult> {
    let z = provider.embed_crop(&cropper::extract_crop(query_image, &crop)?);
    let hits = rank_images(&z, provider, dataset, k)?;
    Ok(RetrievalResult {
        query_image: query_image.id.clone(),
        query_crop: crop,
        k,
        hits,
        provenance: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetManifest, ManifestItem, Split, SynthConfig};
    use crate::encoders::{build_models, CropEncoder, ModelConfig, PyramidEncoder};
    use crate::evalkit::EvalModels;

    fn models() -> (CropEncoder<f32>, PyramidEncoder<f32>) {
        let cfg = ModelConfig {
            tiny_width: 4,
            fpn_channels: 8,
            embed_dim: 8,
            projection_hidden: 8,
            ..Default::default()
        };
        build_models(&cfg, 3).unwrap()
    }

    fn copies(n: usize) -> Dataset {
        let cfg = SynthConfig {
            image_size: 64,
            ..Default::default()
        };
        let items = (0..n)
            .map(|i| ManifestItem {
                id: format!("copy{i}"),
                path: None,
                seed: Some(99),
            })
            .collect();
        Dataset::from_manifest(
            DatasetManifest {
                items,
                split: Split::Eval,
                generator_config: Some(cfg),
                warnings: vec![],
            },
            "",
        )
    }

    #[test]
    fn identical_images_rank_in_dataset_order() {
        let (crop, pyr) = models();
        let ds = copies(5);
        let img = ds.load(0).unwrap();
        let m = EvalModels {
            crop: &crop,
            pyramid: &pyr,
        };
        let r = retrieve_topk(
            &m,
            &img,
            CropSpec {
                a: 8,
                b: 8,
                w: 16,
                h: 16,
            },
            &ds,
            3,
        )
        .unwrap();
        assert_eq!(r.hits.len(), 3);
        assert!(r.hits.iter().all(|h| h.score == r.hits[0].score));
        assert_eq!(
            r.hits.iter().map(|h| h.index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn k_is_clamped_and_validated() {
        let (crop, pyr) = models();
        let ds = Dataset::synthetic(
            &SynthConfig {
                image_size: 64,
                ..Default::default()
            },
            4,
            Split::Eval,
        );
        let img = ds.load(1).unwrap();
        let m = EvalModels {
            crop: &crop,
            pyramid: &pyr,
        };
        let c = CropSpec {
            a: 0,
            b: 0,
            w: 20,
            h: 20,
        };
        let r = retrieve_topk(&m, &img, c, &ds, 10).unwrap();
        assert_eq!(r.hits.len(), 4);
        assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(matches!(
            retrieve_topk(&m, &img, c, &ds, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn score_is_overall_cell_max() {
        let maps = vec![
            FeatureMap {
                level: 0,
                stride: 8,
                rows: 1,
                cols: 2,
                dim: 2,
                data: vec![1.0, 0.0, 0.0, 1.0],
            },
            FeatureMap {
                level: 1,
                stride: 16,
                rows: 1,
                cols: 1,
                dim: 2,
                data: vec![0.6, 0.8],
            },
        ];
        assert_eq!(image_score(&[0.0, 1.0], &maps), 1.0);
        assert!((image_score(&[0.8, 0.6], &maps) - 0.96).abs() < 1e-6);
    }
}
