//! Image sources: the synthetic shape-scene generator, directory loading,
//! minimum-size normalization and batch padding.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use lococontrast_nn::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Synthetic,
    File,
}

/// RGB image in planar `[3, H, W]` layout with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub source: ImageSource,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<f32>,
        source: ImageSource,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ContractViolation(format!(
                "image dims must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::ContractViolation(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                3 * width * height
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ContractViolation(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            pixels,
            source,
        })
    }

    pub fn from_rgb8(id: impl Into<String>, img: &RgbImage, source: ImageSource) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0.0; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
            }
        }
        Self {
            id: id.into(),
            width: w,
            height: h,
            pixels,
            source,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| {
                (self.get(c, y as usize, x as usize) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.pixels
                .iter()
                .map(|&v| F::from_f64_lossy(v as f64))
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Peak amplitude of the per-pixel background noise.
    pub noise_amplitude: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            min_shapes: 3,
            max_shapes: 8,
            shape_kinds: vec![ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle],
            noise_amplitude: 0.04,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// `largest_stride` is the coarsest pyramid stride the images will be fed to.
    pub fn validate(&self, largest_stride: usize) -> Result<()> {
        if self.image_size < 2 * largest_stride.max(1) {
            return Err(Error::Config(format!(
                "image_size {} is below 2 x stride {largest_stride}",
                self.image_size
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "shape count range {}..={} is empty",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Config("no shape kinds enabled".into()));
        }
        if !(0.0..=0.25).contains(&self.noise_amplitude) {
            return Err(Error::Config(format!(
                "noise_amplitude {} outside [0, 0.25]",
                self.noise_amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_config: Option<SynthConfig>,
    /// Files skipped during ingestion, one message per file.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.check_unique_ids()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        write_atomic(path, text.as_bytes())
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::ContractViolation(format!(
                    "duplicate image id {:?} in manifest",
                    item.id
                )));
            }
        }
        Ok(())
    }
}

/// Smallest longer side fed to the encoders for file-backed images.
pub const MIN_IMAGE_SIDE: usize = 608;

/// A manifest plus the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub base_dir: PathBuf,
}

impl Dataset {
    /// Opens either a manifest JSON file or a directory of images.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let manifest_path = path.join("manifest.json");
            if manifest_path.is_file() {
                return Self::open(&manifest_path);
            }
            let manifest = load_image_dir(path)?;
            return Ok(Self {
                manifest,
                base_dir: path.to_path_buf(),
            });
        }
        let manifest = DatasetManifest::read(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, base_dir })
    }

    pub fn from_manifest(manifest: DatasetManifest, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest,
            base_dir: base_dir.into(),
        }
    }

    /// In-memory synthetic dataset; images regenerate from per-item seeds.
    pub fn synthetic(config: &SynthConfig, count: usize, split: Split) -> Self {
        let items = (0..count)
            .map(|i| ManifestItem {
                id: synth_id(i),
                path: None,
                seed: Some(item_seed(config.seed, i)),
            })
            .collect();
        Self {
            manifest: DatasetManifest {
                items,
                split,
                generator_config: Some(config.clone()),
                warnings: Vec::new(),
            },
            base_dir: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.manifest.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.items.iter().map(|i| i.id.as_str())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.manifest.items.iter().position(|i| i.id == id)
    }

    /// Minimum longer side for this dataset's images; generated sets keep
    /// their native size.
    pub fn min_side(&self) -> Option<usize> {
        self.manifest
            .generator_config
            .is_none()
            .then_some(MIN_IMAGE_SIDE)
    }

    /// [`Dataset::load`] followed by the size normalization for this dataset.
    pub fn load_normalized(&self, index: usize) -> Result<ImageSample> {
        let image = self.load(index)?;
        Ok(match self.min_side() {
            Some(side) => ensure_min_size(image, side),
            None => image,
        })
    }

    pub fn load(&self, index: usize) -> Result<ImageSample> {
        let item =
            self.manifest.items.get(index).ok_or_else(|| {
                Error::ContractViolation(format!("image index {index} out of range"))
            })?;
        if let Some(path) = &item.path {
            let full = self.base_dir.join(path);
            let source = if self.manifest.generator_config.is_some() {
                ImageSource::Synthetic
            } else {
                ImageSource::File
            };
            return load_image_file(&full, &item.id, source);
        }
        match (&self.manifest.generator_config, item.seed) {
            (Some(cfg), Some(seed)) => Ok(ImageSample::from_rgb8(
                item.id.clone(),
                &render_scene(cfg, seed).0,
                ImageSource::Synthetic,
            )),
            _ => Err(Error::ContractViolation(format!(
                "item {:?} has neither a path nor a generator seed",
                item.id
            ))),
        }
    }
}

pub fn load_image_file(path: &Path, id: &str, source: ImageSource) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(ImageSample::from_rgb8(id, &img.to_rgb8(), source))
}

fn synth_id(i: usize) -> String {
    format!("synth_{i:05}")
}

fn item_seed(seed: u64, i: usize) -> u64 {
    seeding::derive_seed(&[seed, 0x5359_4e54, i as u64])
}

/// Geometry of one placed shape, returned alongside each rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    /// Radius of the shape's bounding circle.
    pub radius: f32,
    pub color: [f32; 3],
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

/// Renders one scene: a smooth low-amplitude background with pixel noise and
/// a set of non-overlapping flat-colored shapes, all fully inside the frame.
pub fn render_scene(config: &SynthConfig, seed: u64) -> (RgbImage, Vec<PlacedShape>) {
    let mut rng = seeding::stream(&[seed]);
    let size = config.image_size;
    let s = size as f32;

    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.45));
    // Two low-frequency waves per channel give every region a distinct tint.
    let waves: Vec<[f32; 4]> = (0..6)
        .map(|_| {
            [
                rng.gen_range(0.5..2.0) * std::f32::consts::TAU / s,
                rng.gen_range(0.5..2.0) * std::f32::consts::TAU / s,
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.04..0.08),
            ]
        })
        .collect();

    let count = rng.gen_range(config.min_shapes..=config.max_shapes);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
    let (rmin, rmax) = ((0.05 * s).max(3.0), (0.14 * s).max(4.0));
    let mut attempts = 0;
    while shapes.len() < count && attempts < 2000 {
        attempts += 1;
        // Shrink the size range if placement keeps failing.
        let shrink = 1.0 - (attempts as f32 / 2000.0) * 0.6;
        let radius = rng.gen_range(rmin * shrink..=rmax * shrink);
        let cx = rng.gen_range(radius + 1.0..=s - radius - 1.0);
        let cy = rng.gen_range(radius + 1.0..=s - radius - 1.0);
        let clear = shapes.iter().all(|o| {
            let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
            d > o.radius + radius + 2.0
        });
        let kind = config.shape_kinds[rng.gen_range(0..config.shape_kinds.len())];
        let pc = PALETTE[rng.gen_range(0..PALETTE.len())];
        let color = pc.map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
        if clear {
            shapes.push(PlacedShape {
                kind,
                cx,
                cy,
                radius,
                color,
            });
        }
    }

    let amp = config.noise_amplitude;
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut rgb = [0f32; 3];
            for c in 0..3 {
                let mut v = base[c];
                for wv in &waves[2 * c..2 * c + 2] {
                    v += wv[3] * (wv[0] * fx + wv[1] * fy + wv[2]).sin();
                }
                rgb[c] = v;
            }
            if let Some(shape) = shapes.iter().find(|sh| shape_contains(sh, fx, fy)) {
                rgb = shape.color;
            }
            let px = rgb.map(|v| {
                let n = if amp > 0.0 {
                    rng.gen_range(-amp..=amp)
                } else {
                    0.0
                };
                ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    (img, shapes)
}

fn shape_contains(shape: &PlacedShape, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - shape.cx, y - shape.cy);
    let r = shape.radius;
    match shape.kind {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        // Square inscribed in the bounding circle.
        ShapeKind::Rectangle => {
            let half = r * std::f32::consts::FRAC_1_SQRT_2;
            dx.abs() <= half && dy.abs() <= half
        }
        // Upward equilateral triangle inscribed in the bounding circle.
        ShapeKind::Triangle => {
            let (ax, ay) = (0.0, -r);
            let (bx, by) = (-r * 0.866_025_4, r * 0.5);
            let (cx, cy) = (r * 0.866_025_4, r * 0.5);
            let s1 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
            let s2 = (cx - bx) * (dy - by) - (cy - by) * (dx - bx);
            let s3 = (ax - cx) * (dy - cy) - (ay - cy) * (dx - cx);
            (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0) || (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0)
        }
    }
}

/// Writes `count` scenes as PNGs plus `manifest.json` into `out_dir`.
pub fn generate_synthetic(
    config: &SynthConfig,
    count: usize,
    out_dir: &Path,
    split: Split,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    config.validate(1)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let id = synth_id(i);
        let seed = item_seed(config.seed, i);
        let (img, _) = render_scene(config, seed);
        let file = PathBuf::from(format!("{id}.png"));
        let path = out_dir.join(&file);
        let mut buf = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
        write_atomic(&path, &buf)?;
        items.push(ManifestItem {
            id,
            path: Some(file),
            seed: Some(seed),
        });
    }
    let manifest = DatasetManifest {
        items,
        split,
        generator_config: Some(config.clone()),
        warnings: Vec::new(),
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Lists decodable images in `dir` in lexicographic filename order. Files
/// that fail to decode are skipped and noted in `warnings`.
pub fn load_image_dir(dir: &Path) -> Result<DatasetManifest> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|name| name != "manifest.json")
        .collect();
    names.sort();
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for name in names {
        let path = dir.join(&name);
        // Header probe only; full decode happens on load.
        let ok = image::ImageReader::open(&path)
            .ok()
            .and_then(|r| r.with_guessed_format().ok())
            .and_then(|r| r.into_dimensions().ok())
            .is_some();
        if ok {
            let id = Path::new(&name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| name.clone());
            let id = if items.iter().any(|i: &ManifestItem| i.id == id) {
                name.clone()
            } else {
                id
            };
            items.push(ManifestItem {
                id,
                path: Some(PathBuf::from(&name)),
                seed: None,
            });
        } else {
            log::warn!("skipping undecodable file {}", path.display());
            warnings.push(format!("skipped undecodable file {name}"));
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no decodable images in {}",
            dir.display()
        )));
    }
    Ok(DatasetManifest {
        items,
        split: Split::Eval,
        generator_config: None,
        warnings,
    })
}

/// Upscales (bilinear, aspect-preserving) so that `max(W, H) == min_side`
/// when the image is smaller; otherwise returns it unchanged.
pub fn ensure_min_size(image: ImageSample, min_side: usize) -> ImageSample {
    let longest = image.width.max(image.height);
    if longest >= min_side || min_side == 0 {
        return image;
    }
    let scale = min_side as f64 / longest as f64;
    let scaled = |d: usize| {
        if d == longest {
            min_side
        } else {
            ((d as f64 * scale).round() as usize).max(1)
        }
    };
    let (nw, nh) = (scaled(image.width), scaled(image.height));
    resize_bilinear(&image, nw, nh)
}

pub fn resize_bilinear(image: &ImageSample, nw: usize, nh: usize) -> ImageSample {
    let (w, h) = (image.width, image.height);
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let axis = |i: usize, scale: f64, n: usize| {
        let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..nw).map(|x| axis(x, sx, w)).collect();
    let mut pixels = vec![0.0f32; 3 * nw * nh];
    for y in 0..nh {
        let (y0, y1, ty) = axis(y, sy, h);
        for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = image.get(c, y0, x0) * (1.0 - tx) + image.get(c, y0, x1) * tx;
                let bot = image.get(c, y1, x0) * (1.0 - tx) + image.get(c, y1, x1) * tx;
                pixels[(c * nh + y) * nw + x] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0);
            }
        }
    }
    ImageSample {
        id: image.id.clone(),
        width: nw,
        height: nh,
        pixels,
        source: image.source,
    }
}

/// Batch of images zero-padded at the bottom-right to a common size.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub images: Vec<ImageSample>,
    /// `(W, H)` of each image before padding.
    pub original_sizes: Vec<(usize, usize)>,
}

impl PaddedBatch {
    pub fn padded_dims(&self) -> (usize, usize) {
        self.images
            .first()
            .map(|i| (i.width, i.height))
            .unwrap_or((0, 0))
    }

    /// Recovers the `i`-th input by cropping away its padding.
    pub fn unpad(&self, i: usize) -> ImageSample {
        let (w, h) = self.original_sizes[i];
        let img = &self.images[i];
        let mut pixels = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in 0..h {
                let row = (c * img.height + y) * img.width;
                pixels.extend_from_slice(&img.pixels[row..row + w]);
            }
        }
        ImageSample {
            id: img.id.clone(),
            width: w,
            height: h,
            pixels,
            source: img.source,
        }
    }
}

pub fn pad_batch(images: Vec<ImageSample>) -> Result<PaddedBatch> {
    if images.is_empty() {
        return Err(Error::ContractViolation("cannot pad an empty batch".into()));
    }
    let wmax = images.iter().map(|i| i.width).max().unwrap_or(0);
    let hmax = images.iter().map(|i| i.height).max().unwrap_or(0);
    let original_sizes = images.iter().map(|i| (i.width, i.height)).collect();
    let images = images
        .into_iter()
        .map(|img| {
            if img.width == wmax && img.height == hmax {
                return img;
            }
            let mut pixels = vec![0.0; 3 * wmax * hmax];
            for c in 0..3 {
                for y in 0..img.height {
                    let src = (c * img.height + y) * img.width;
                    let dst = (c * hmax + y) * wmax;
                    pixels[dst..dst + img.width].copy_from_slice(&img.pixels[src..src + img.width]);
                }
            }
            ImageSample {
                id: img.id,
                width: wmax,
                height: hmax,
                pixels,
                source: img.source,
            }
        })
        .collect();
    Ok(PaddedBatch {
        images,
        original_sizes,
    })
}

/// Writes `path.partial`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
