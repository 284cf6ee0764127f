//! Random square crops and flip augmentations, plus the point mapping that
//! keeps the crop center aligned with a flipped full image.
//!
//! Two flip conventions coexist. Pixel arrays flip by index (`x -> W - 1 - x`)
//! and continuous coordinates flip about the frame (`x -> W - x`). A pixel
//! whose center sits at `x + 0.5` therefore lands at `W - x - 0.5`, the center
//! of pixel `W - 1 - x`, so both conventions describe the same motion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};

/// Lower and upper crop side as fractions of `max(W, H)`.
pub const CROP_MIN_FRACTION: f64 = 0.10;
pub const CROP_MAX_FRACTION: f64 = 0.25;

/// Square crop rectangle `[a, a + w) x [b, b + h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub a: usize,
    pub b: usize,
    pub w: usize,
    pub h: usize,
}

impl CropSpec {
    pub fn center(&self) -> (f64, f64) {
        (
            self.a as f64 + self.w as f64 / 2.0,
            self.b as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn right(&self) -> usize {
        self.a + self.w
    }

    pub fn bottom(&self) -> usize {
        self.b + self.h
    }

    /// Closed-rectangle containment of a continuous point.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.a as f64
            && x <= self.right() as f64
            && y >= self.b as f64
            && y <= self.bottom() as f64
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.right() <= width && self.bottom() <= height
    }
}

/// Integer side range `[lo, hi]` admitted for a `W x H` image, before the
/// clamp to `min(W, H)`.
pub fn crop_side_range(width: usize, height: usize) -> Result<(usize, usize)> {
    let longest = width.max(height) as f64;
    if CROP_MIN_FRACTION * longest < 1.0 {
        return Err(Error::ContractViolation(format!(
            "image {width}x{height} too small for a crop of at least one pixel"
        )));
    }
    let lo = (CROP_MIN_FRACTION * longest - 1e-9).ceil() as usize;
    let hi = (CROP_MAX_FRACTION * longest + 1e-9).floor() as usize;
    Ok((lo, hi.max(lo)))
}

/// Draws a square crop with side uniform over the admissible integer range
/// and top-left corner uniform over all placements inside the image.
pub fn sample_crop<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Result<CropSpec> {
    let (lo, hi) = crop_side_range(width, height)?;
    let mut side = rng.gen_range(lo..=hi);
    let shortest = width.min(height);
    if side > shortest {
        log::warn!(
            "crop side {side} exceeds min(W, H) = {shortest} for {width}x{height}; clamping"
        );
        side = shortest;
    }
    let a = rng.gen_range(0..=width - side);
    let b = rng.gen_range(0..=height - side);
    Ok(CropSpec {
        a,
        b,
        w: side,
        h: side,
    })
}

pub fn extract_crop(image: &ImageSample, crop: &CropSpec) -> Result<ImageSample> {
    if !crop.fits_in(image.width, image.height) {
        return Err(Error::ContractViolation(format!(
            "crop {crop:?} outside {}x{} image",
            image.width, image.height
        )));
    }
    let mut pixels = Vec::with_capacity(3 * crop.w * crop.h);
    for c in 0..3 {
        for y in crop.b..crop.bottom() {
            let row = (c * image.height + y) * image.width;
            pixels.extend_from_slice(&image.pixels[row + crop.a..row + crop.right()]);
        }
    }
    Ok(ImageSample {
        id: format!("{}@{},{},{}", image.id, crop.a, crop.b, crop.w),
        width: crop.w,
        height: crop.h,
        pixels,
        source: image.source,
    })
}

/// Which flips were drawn for one image, and the dims they apply to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugRecord {
    pub hflip: bool,
    pub vflip: bool,
    pub width: usize,
    pub height: usize,
}

impl AugRecord {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            hflip: false,
            vflip: false,
            width,
            height,
        }
    }
}

/// Independent fair coins for horizontal then vertical flip.
pub fn sample_flips<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> AugRecord {
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    AugRecord {
        hflip,
        vflip,
        width,
        height,
    }
}

/// Applies HFlip then VFlip as recorded. Involutive.
pub fn apply_flips(image: &ImageSample, rec: &AugRecord) -> Result<ImageSample> {
    if (image.width, image.height) != (rec.width, rec.height) {
        return Err(Error::ContractViolation(format!(
            "augmentation recorded for {}x{} applied to {}x{} image",
            rec.width, rec.height, image.width, image.height
        )));
    }
    let (w, h) = (image.width, image.height);
    let mut out = image.clone();
    if !rec.hflip && !rec.vflip {
        return Ok(out);
    }
    for c in 0..3 {
        for y in 0..h {
            let sy = if rec.vflip { h - 1 - y } else { y };
            let src = &image.pixels[(c * h + sy) * w..][..w];
            let dst = &mut out.pixels[(c * h + y) * w..][..w];
            if rec.hflip {
                for (x, d) in dst.iter_mut().enumerate() {
                    *d = src[w - 1 - x];
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Continuous-coordinate image of `(x, y)` under the recorded flips.
pub fn map_point(rec: &AugRecord, (x, y): (f64, f64)) -> (f64, f64) {
    let x = if rec.hflip { rec.width as f64 - x } else { x };
    let y = if rec.vflip { rec.height as f64 - y } else { y };
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> ImageSample {
        let px = (0..3 * w * h).map(|i| (i % 251) as f32 / 251.0).collect();
        ImageSample::new("ramp", w, h, px, ImageSource::File).unwrap()
    }

    #[test]
    fn side_range_follows_the_longest_edge() {
        assert_eq!(crop_side_range(608, 608).unwrap(), (61, 152));
        assert_eq!(crop_side_range(400, 608).unwrap(), (61, 152));
        assert_eq!(crop_side_range(256, 256).unwrap(), (26, 64));
        assert!(crop_side_range(9, 5).is_err());
    }

    #[test]
    fn sampled_sides_stay_in_range_for_portrait_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let c = sample_crop(400, 608, &mut rng).unwrap();
            assert!(c.w as f64 >= 60.8 && c.w as f64 <= 152.0);
            assert_eq!(c.w, c.h);
            assert!(c.fits_in(400, 608));
        }
    }

    #[test]
    fn extreme_aspect_clamps_to_the_short_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = sample_crop(1000, 30, &mut rng).unwrap();
            assert_eq!(c.w, 30);
            assert!(c.fits_in(1000, 30));
        }
    }

    #[test]
    fn identity_crop_returns_the_image() {
        let img = ramp(17, 9);
        let crop = extract_crop(
            &img,
            &CropSpec {
                a: 0,
                b: 0,
                w: 17,
                h: 9,
            },
        )
        .unwrap();
        assert_eq!(crop.pixels, img.pixels);
    }

    #[test]
    fn crop_origin_indexes_the_source() {
        let img = ramp(64, 64);
        let crop = extract_crop(
            &img,
            &CropSpec {
                a: 10,
                b: 20,
                w: 32,
                h: 32,
            },
        )
        .unwrap();
        for c in 0..3 {
            assert_eq!(crop.get(c, 0, 0), img.get(c, 20, 10));
            assert_eq!(crop.get(c, 31, 31), img.get(c, 51, 41));
        }
    }

    #[test]
    fn out_of_bounds_crop_is_rejected() {
        let img = ramp(20, 20);
        let err = extract_crop(
            &img,
            &CropSpec {
                a: 10,
                b: 0,
                w: 11,
                h: 11,
            },
        );
        assert!(matches!(err, Err(Error::ContractViolation(_))));
    }

    #[test]
    fn flips_follow_the_index_convention_and_invert() {
        let img = ramp(7, 5);
        let rec = AugRecord {
            hflip: true,
            vflip: false,
            width: 7,
            height: 5,
        };
        let f = apply_flips(&img, &rec).unwrap();
        for x in 0..7 {
            assert_eq!(f.get(1, 2, x), img.get(1, 2, 6 - x));
        }
        for (h, v) in [(false, false), (true, false), (false, true), (true, true)] {
            let rec = AugRecord {
                hflip: h,
                vflip: v,
                width: 7,
                height: 5,
            };
            let twice = apply_flips(&apply_flips(&img, &rec).unwrap(), &rec).unwrap();
            assert_eq!(twice, img);
        }
        assert_eq!(apply_flips(&img, &AugRecord::identity(7, 5)).unwrap(), img);
    }

    #[test]
    fn flip_dims_must_match() {
        let img = ramp(7, 5);
        assert!(apply_flips(&img, &AugRecord::identity(5, 7)).is_err());
    }

    #[test]
    fn map_point_convention() {
        let rec = AugRecord {
            hflip: true,
            vflip: false,
            width: 608,
            height: 608,
        };
        assert_eq!(map_point(&rec, (100.0, 50.0)), (508.0, 50.0));
        assert_eq!(
            map_point(&AugRecord::identity(608, 608), (100.0, 50.0)),
            (100.0, 50.0)
        );
    }

    #[test]
    fn mapped_pixel_centers_see_the_same_pixel() {
        let img = ramp(11, 6);
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let rec = AugRecord {
                hflip: h,
                vflip: v,
                width: 11,
                height: 6,
            };
            let f = apply_flips(&img, &rec).unwrap();
            for y in 0..6 {
                for x in 0..11 {
                    let (mx, my) = map_point(&rec, (x as f64 + 0.5, y as f64 + 0.5));
                    let (ix, iy) = ((mx - 0.5).round() as usize, (my - 0.5).round() as usize);
                    assert_eq!(img.get(0, y, x), f.get(0, iy, ix));
                }
            }
        }
    }

    #[test]
    fn seeded_flips_are_reproducible() {
        let a = sample_flips(10, 10, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_flips(10, 10, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
