use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{imageops, ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{combine_levels, first_argmax, Heatmap, LevelHeatmap};
use crate::cropper::CropSpec;
use crate::dataset::{self, ImageSample};
use crate::error::{Error, Result};

const ORANGE: Rgb<u8> = Rgb([255, 165, 0]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Weight of the photo under the colormap; 0 draws the field alone.
    pub image_alpha: f32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { image_alpha: 0.35 }
    }
}

/// Blue (0) through cyan and yellow to red (1).
pub fn colormap(t: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 4] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let x = t * 3.0;
    let i = (x.floor() as usize).min(2);
    let f = x - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
}

/// Files written for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapFiles {
    pub levels: Vec<PathBuf>,
    pub combined: PathBuf,
}

fn normalized(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

fn field(
    t: &[f32],
    width: usize,
    height: usize,
    image: &ImageSample,
    opts: &RenderOptions,
) -> RgbImage {
    let a = opts.image_alpha.clamp(0.0, 1.0);
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let c = colormap(t[y * width + x]);
        Rgb([0, 1, 2].map(|ch| {
            let px = image.get(ch, y, x).clamp(0.0, 1.0) * 255.0;
            (c[ch] as f32 * (1.0 - a) + px * a).round() as u8
        }))
    })
}

/// Outline of the pixel rectangle `[x0, x1] x [y0, y1]`, clipped to the canvas.
fn outline(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn draw_crop(img: &mut RgbImage, crop: &CropSpec) {
    outline(
        img,
        crop.a as i64,
        crop.b as i64,
        crop.right() as i64 - 1,
        crop.bottom() as i64 - 1,
        ORANGE,
    );
}

/// Pixel holding the argmax marker: the cell center rounded to the nearest
/// integer, clamped to the canvas.
pub(crate) fn marker_pixel(center: (f64, f64), width: usize, height: usize) -> (i64, i64) {
    let x = (center.0.round() as i64).min(width as i64 - 1);
    let y = (center.1.round() as i64).min(height as i64 - 1);
    (x, y)
}

/// White stride-sized box around `center` plus a 3x3 dot on the marker pixel.
fn draw_marker(img: &mut RgbImage, center: (f64, f64), stride: usize) {
    let (mx, my) = marker_pixel(center, img.width() as usize, img.height() as usize);
    let half = stride as f64 / 2.0;
    let x0 = (center.0 - half).round() as i64;
    let y0 = (center.1 - half).round() as i64;
    outline(
        img,
        x0,
        y0,
        x0 + stride as i64 - 1,
        y0 + stride as i64 - 1,
        WHITE,
    );
    outline(img, mx - 1, my - 1, mx + 1, my + 1, WHITE);
    img.put_pixel(mx as u32, my as u32, WHITE);
}

/// One level drawn as cell blocks.
pub(crate) fn level_image(
    level: &LevelHeatmap,
    image: &ImageSample,
    crop: Option<&CropSpec>,
    opts: &RenderOptions,
) -> RgbImage {
    let (w, h) = (image.width, image.height);
    let t = normalized(&level.values);
    let mut per_pixel = Vec::with_capacity(w * h);
    for y in 0..h {
        let r = (y / level.stride).min(level.rows - 1);
        for x in 0..w {
            let c = (x / level.stride).min(level.cols - 1);
            per_pixel.push(t[r * level.cols + c]);
        }
    }
    let mut img = field(&per_pixel, w, h, image, opts);
    if let Some(c) = crop {
        draw_crop(&mut img, c);
    }
    draw_marker(&mut img, level.argmax_center(), level.stride);
    img
}

pub(crate) fn combined_image(
    heat: &Heatmap,
    image: &ImageSample,
    opts: &RenderOptions,
) -> RgbImage {
    let (w, h) = (image.width, image.height);
    let combined = combine_levels(heat);
    let t = normalized(&combined);
    let mut img = field(&t, w, h, image, opts);
    if let Some(c) = &heat.crop {
        draw_crop(&mut img, c);
    }
    let i = first_argmax(&combined);
    let center = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
    draw_marker(&mut img, center, heat.levels[0].stride);
    img
}

pub(crate) fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    dataset::write_atomic(path, &buf)
}

/// Writes `{stem}_level{l}.png` per level and `{stem}_combined.png` into
/// `out_dir`.
pub fn render_heatmap(
    heat: &Heatmap,
    image: &ImageSample,
    out_dir: &Path,
    stem: &str,
    opts: &RenderOptions,
) -> Result<HeatmapFiles> {
    if (heat.width, heat.height) != (image.width, image.height) {
        return Err(Error::ContractViolation(format!(
            "heatmap for {}x{} rendered over {}x{} image",
            heat.width, heat.height, image.width, image.height
        )));
    }
    if heat.levels.is_empty() {
        return Err(Error::ContractViolation("heatmap has no levels".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut levels = Vec::with_capacity(heat.levels.len());
    for l in &heat.levels {
        let path = out_dir.join(format!("{stem}_level{}.png", l.level));
        write_png(&level_image(l, image, heat.crop.as_ref(), opts), &path)?;
        levels.push(path);
    }
    let combined = out_dir.join(format!("{stem}_combined.png"));
    write_png(&combined_image(heat, image, opts), &combined)?;
    Ok(HeatmapFiles { levels, combined })
}

/// Query crop first (orange frame), then the hits in rank order, as square
/// thumbnails on a grid.
pub fn render_contact_sheet(
    query: &ImageSample,
    hits: &[ImageSample],
    thumb: u32,
    out_path: &Path,
) -> Result<()> {
    let n = hits.len() + 1;
    let cols = n.min(6) as u32;
    let rows = n.div_ceil(cols as usize) as u32;
    let gap = 4;
    let mut sheet = RgbImage::from_pixel(
        cols * (thumb + gap) + gap,
        rows * (thumb + gap) + gap,
        Rgb([32, 32, 32]),
    );
    for (i, img) in std::iter::once(query).chain(hits).enumerate() {
        let t = imageops::resize(&img.to_rgb8(), thumb, thumb, imageops::FilterType::Triangle);
        let (x, y) = (
            gap + (i as u32 % cols) * (thumb + gap),
            gap + (i as u32 / cols) * (thumb + gap),
        );
        imageops::replace(&mut sheet, &t, x as i64, y as i64);
        if i == 0 {
            outline(
                &mut sheet,
                x as i64,
                y as i64,
                (x + thumb - 1) as i64,
                (y + thumb - 1) as i64,
                ORANGE,
            );
        }
    }
    write_png(&sheet, out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageSource;
    use crate::encoders::CellIndex;

    fn gray(w: usize, h: usize) -> ImageSample {
        ImageSample::new("g", w, h, vec![0.5; 3 * w * h], ImageSource::File).unwrap()
    }

    fn constant_heat(w: usize, h: usize) -> Heatmap {
        let levels = [8usize, 16, 32, 64, 128]
            .iter()
            .enumerate()
            .map(|(l, &s)| {
                let (rows, cols) = (h.div_ceil(s), w.div_ceil(s));
                LevelHeatmap {
                    level: l,
                    stride: s,
                    rows,
                    cols,
                    values: vec![0.3; rows * cols],
                    argmax: CellIndex::new(l, 0, 0),
                }
            })
            .collect();
        Heatmap {
            width: w,
            height: h,
            crop: Some(CropSpec {
                a: 20,
                b: 30,
                w: 40,
                h: 40,
            }),
            levels,
        }
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        assert_eq!(colormap(f32::NAN), [0, 0, 255]);
    }

    #[test]
    fn constant_map_is_one_color_with_overlays() {
        let heat = constant_heat(128, 128);
        let img = level_image(
            &heat.levels[0],
            &gray(128, 128),
            heat.crop.as_ref(),
            &RenderOptions { image_alpha: 0.0 },
        );
        let blue = Rgb([0, 0, 255]);
        assert_eq!(*img.get_pixel(100, 100), blue);
        assert_eq!(*img.get_pixel(20, 50), ORANGE);
        assert_eq!(*img.get_pixel(59, 69), ORANGE);
        // Argmax cell (0, 0) at stride 8: center (4, 4), box [0, 7].
        assert_eq!(*img.get_pixel(4, 4), WHITE);
        assert_eq!(*img.get_pixel(7, 0), WHITE);
        let colors: std::collections::HashSet<_> = img.pixels().collect();
        assert_eq!(colors.len(), 3);
    }

    #[test]
    fn marker_sits_on_rounded_center() {
        assert_eq!(marker_pixel((12.0, 4.0), 64, 64), (12, 4));
        assert_eq!(marker_pixel((64.0, 64.0), 64, 64), (63, 63));
        let mut heat = constant_heat(64, 64);
        heat.levels[1].values[3] = 1.0;
        heat.levels[1].argmax = CellIndex::new(1, 0, 3);
        let img = level_image(
            &heat.levels[1],
            &gray(64, 64),
            None,
            &RenderOptions { image_alpha: 0.0 },
        );
        assert_eq!(*img.get_pixel(56, 8), WHITE);
    }

    #[test]
    fn writes_five_levels_and_a_combined_map() {
        let dir = tempfile::tempdir().unwrap();
        let heat = constant_heat(96, 80);
        let files = render_heatmap(
            &heat,
            &gray(96, 80),
            dir.path(),
            "q",
            &RenderOptions::default(),
        )
        .unwrap();
        assert_eq!(files.levels.len(), 5);
        for p in files.levels.iter().chain([&files.combined]) {
            let png = image::open(p).unwrap();
            assert_eq!((png.width(), png.height()), (96, 80));
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 6);
        assert!(render_heatmap(
            &heat,
            &gray(10, 10),
            dir.path(),
            "q",
            &RenderOptions::default()
        )
        .is_err());
    }

    #[test]
    fn contact_sheet_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sheet.png");
        render_contact_sheet(&gray(20, 20), &vec![gray(30, 40); 7], 32, &p).unwrap();
        let png = image::open(&p).unwrap();
        assert_eq!((png.width(), png.height()), (6 * 36 + 4, 2 * 36 + 4));
    }
}
