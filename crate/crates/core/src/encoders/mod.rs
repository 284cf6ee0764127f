//! The two non-siamese encoder pipelines.
//!
//! * [`CropEncoder`]: backbone, global average pool, 2-layer MLP, L2 norm.
//!   One embedding per crop.
//! * [`PyramidEncoder`]: its own backbone, a 5-level feature pyramid
//!   (laterals + top-down sum for strides 8/16/32, two extra stride-2 convs
//!   for 64/128), and a shared per-cell linear map to the embedding width
//!   followed by L2 norm. One embedding per grid cell per level.

mod backbone;
mod grid;

use lococontrast_nn::{Graph, ParamSet, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::seeding;

use backbone::{Backbone, ConvLayer, LinearLayer};
pub use grid::{grid_geometry, CellIndex, LevelGrid, PyramidGrid};

pub const PYRAMID_LEVELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Plain stride-2 conv stages; desk-scale runs.
    Tiny,
    /// ResNet-18 layout (basic residual blocks, no normalization layers).
    Resnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub embed_dim: usize,
    pub pyramid_levels: usize,
    pub base_stride: usize,
    pub projection_hidden: usize,
    pub fpn_channels: usize,
    /// Channel width of the first tiny-backbone stage.
    pub tiny_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            embed_dim: 128,
            pyramid_levels: PYRAMID_LEVELS,
            base_stride: 8,
            projection_hidden: 256,
            fpn_channels: 64,
            tiny_width: 16,
        }
    }
}

impl ModelConfig {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.pyramid_levels)
            .map(|l| self.base_stride << l)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim < 8 {
            return bad(format!("embed_dim {} must be at least 8", self.embed_dim));
        }
        if self.pyramid_levels != PYRAMID_LEVELS {
            return bad(format!(
                "pyramid_levels must be {PYRAMID_LEVELS}, got {}",
                self.pyramid_levels
            ));
        }
        if self.base_stride < 2 || !self.base_stride.is_power_of_two() {
            return bad(format!(
                "base_stride {} must be a power of two >= 2",
                self.base_stride
            ));
        }
        if self.backbone == BackboneKind::Resnet18 && self.base_stride != 8 {
            return bad("the resnet18 backbone has a fixed base stride of 8".into());
        }
        if self.projection_hidden == 0 || self.fpn_channels == 0 {
            return bad("projection_hidden and fpn_channels must be positive".into());
        }
        if self.backbone == BackboneKind::Tiny && self.tiny_width < 2 {
            return bad(format!("tiny_width {} must be at least 2", self.tiny_width));
        }
        Ok(())
    }
}

/// Per-level grid of unit-norm cell embeddings, cells in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub level: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let i = row * self.cols + col;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Pipeline 1: crop to a single embedding.
#[derive(Clone, Debug)]
pub struct CropEncoder<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    backbone: Backbone,
    fc1: LinearLayer,
    fc2: LinearLayer,
}

/// Pipeline 2: full image to per-cell embeddings on every pyramid level.
#[derive(Clone, Debug)]
pub struct PyramidEncoder<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    backbone: Backbone,
    laterals: [ConvLayer; 3],
    p6: ConvLayer,
    p7: ConvLayer,
    proj: LinearLayer,
}

/// Builds both encoders with weights fully determined by `seed`.
pub fn build_models<F: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> Result<(CropEncoder<F>, PyramidEncoder<F>)> {
    config.validate()?;
    let mut rng = seeding::stream(&[seed, seeding::hash_str("models")]);

    let mut params = ParamSet::new();
    let backbone = Backbone::new(config, &mut params, &mut rng, "crop.backbone");
    let c5 = backbone.channels()[2];
    let fc1 = LinearLayer::new(
        &mut params,
        &mut rng,
        "crop.head.fc1",
        c5,
        config.projection_hidden,
    );
    let fc2 = LinearLayer::new(
        &mut params,
        &mut rng,
        "crop.head.fc2",
        config.projection_hidden,
        config.embed_dim,
    );
    let crop = CropEncoder {
        config: config.clone(),
        params,
        backbone,
        fc1,
        fc2,
    };

    let mut params = ParamSet::new();
    let backbone = Backbone::new(config, &mut params, &mut rng, "pyramid.backbone");
    let ch = backbone.channels();
    let fc = config.fpn_channels;
    let laterals = [0, 1, 2].map(|i| {
        ConvLayer::new(
            &mut params,
            &mut rng,
            &format!("pyramid.fpn.lateral{}", i + 3),
            ch[i],
            fc,
            1,
            1,
        )
    });
    let p6 = ConvLayer::new(&mut params, &mut rng, "pyramid.fpn.p6", ch[2], fc, 3, 2);
    let p7 = ConvLayer::new(&mut params, &mut rng, "pyramid.fpn.p7", fc, fc, 3, 2);
    let proj = LinearLayer::new(&mut params, &mut rng, "pyramid.proj", fc, config.embed_dim);
    let pyramid = PyramidEncoder {
        config: config.clone(),
        params,
        backbone,
        laterals,
        p6,
        p7,
        proj,
    };
    Ok((crop, pyramid))
}

impl<F: Scalar> CropEncoder<F> {
    /// Records the forward pass on `g` and returns the `[1, d]` unit embedding.
    pub fn forward(&self, g: &mut Graph<'_, F>, crop: &ImageSample) -> Var {
        let x = g.input(crop.to_tensor());
        let [_, _, c5] = self.backbone.forward(g, x);
        let pooled = g.global_avg_pool(c5);
        let h = self.fc1.apply(g, pooled);
        let h = g.relu(h);
        let z = self.fc2.apply(g, h);
        g.l2_normalize(z)
    }

    pub fn encode_crop(&self, crop: &ImageSample) -> Vec<f32> {
        let mut g = Graph::new(&self.params);
        let z = self.forward(&mut g, crop);
        g.value(z)
            .data()
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect()
    }
}

impl<F: Scalar> PyramidEncoder<F> {
    /// Raw pyramid maps `[fpn_channels, rows, cols]` for levels 0..5.
    pub fn forward_levels(&self, g: &mut Graph<'_, F>, image: &ImageSample) -> Vec<Var> {
        let x = g.input(image.to_tensor());
        let [c3, c4, c5] = self.backbone.forward(g, x);
        let l3 = self.laterals[0].apply(g, c3);
        let l4 = self.laterals[1].apply(g, c4);
        let p5 = self.laterals[2].apply(g, c5);
        let (_, h4, w4) = g.value(l4).chw();
        let up5 = g.upsample2x(p5, h4, w4);
        let p4 = g.add(l4, up5);
        let (_, h3, w3) = g.value(l3).chw();
        let up4 = g.upsample2x(p4, h3, w3);
        let p3 = g.add(l3, up4);
        let p6 = self.p6.apply(g, c5);
        let r6 = g.relu(p6);
        let p7 = self.p7.apply(g, r6);
        vec![p3, p4, p5, p6, p7]
    }

    /// Projects the cells at flat indices `row * cols + col` of one level
    /// map to unit embeddings, `[cells.len(), d]`.
    pub fn embed_cells(&self, g: &mut Graph<'_, F>, level_map: Var, cells: Vec<usize>) -> Var {
        let rows = g.gather(level_map, cells);
        let z = self.proj.apply(g, rows);
        g.l2_normalize(z)
    }

    pub fn encode_pyramid(&self, image: &ImageSample) -> Vec<FeatureMap> {
        let mut g = Graph::new(&self.params);
        let levels = self.forward_levels(&mut g, image);
        let strides = self.config.strides();
        levels
            .into_iter()
            .enumerate()
            .map(|(level, var)| {
                let (_, rows, cols) = g.value(var).chw();
                let z = self.embed_cells(&mut g, var, (0..rows * cols).collect());
                FeatureMap {
                    level,
                    stride: strides[level],
                    rows,
                    cols,
                    dim: self.config.embed_dim,
                    data: g
                        .value(z)
                        .data()
                        .iter()
                        .map(|v| v.as_f64() as f32)
                        .collect(),
                }
            })
            .collect()
    }
}
